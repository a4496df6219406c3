use crate::error::{Error, Result};

/// Dense multi-hot label matrix `Y ∈ {0,1}^{N×L}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    labels: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, labels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * labels {
            return Err(Error::InvalidArgument(format!(
                "label matrix {rows}×{labels} needs {} entries, got {}",
                rows * labels,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(Self { rows, labels, data })
    }

    pub fn zeros(rows: usize, labels: usize) -> Self {
        Self { rows, labels, data: vec![0; rows * labels] }
    }

    /// Builds from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let labels = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != labels) {
            return Err(Error::InvalidArgument("ragged label rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), labels, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.labels + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.data[i * self.labels + j] = on as u8;
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.labels..(i + 1) * self.labels]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Number of labels shared by rows `a` and `b` (`y_a · y_b`).
    pub fn shared(&self, a: usize, b: usize) -> usize {
        self.row(a).iter().zip(self.row(b)).filter(|(&x, &y)| x == 1 && y == 1).count()
    }

    /// Rows selected in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self { rows: rows.len(), labels: self.labels, data }
    }

    /// Labels as reals, row-major, for use as loss targets.
    pub fn to_reals(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::model::Network;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragePrecision {
    pub value: Real,
    /// False when no item is relevant; `value` is then 0.
    pub defined: bool,
}

/// Non-interpolated average precision: the mean of precision@k over the ranks
/// `k` of relevant items, ranking by descending score with ties broken by
/// ascending index.
pub fn average_precision(scores: &[Real], relevance: &[bool]) -> Result<AveragePrecision> {
    if scores.len() != relevance.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} relevance flags",
            scores.len(),
            relevance.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as Real / (rank + 1) as Real;
        }
    }
    if hits == 0 {
        return Ok(AveragePrecision { value: 0.0, defined: false });
    }
    Ok(AveragePrecision { value: sum / hits as Real, defined: true })
}

/// Per-class and aggregate classification metrics.
///
/// Classes without any positive in `y` are excluded from mAP and CF1 (their
/// entries are `None`) and counted in `excluded_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: Vec<Option<Real>>,
    pub map: Real,
    pub per_class_precision: Vec<Option<Real>>,
    pub per_class_recall: Vec<Option<Real>>,
    pub per_class_f1: Vec<Option<Real>>,
    /// Macro average of the per-class F1 scores.
    pub cf1: Real,
    /// Micro F1 over every (image, label) cell.
    pub of1: Real,
    pub threshold: Real,
    pub excluded_classes: usize,
}

fn ratio(num: usize, den: usize) -> Real {
    if den == 0 {
        0.0
    } else {
        num as Real / den as Real
    }
}

pub fn metrics(scores: &Tensor, y: &LabelMatrix, threshold: Real) -> Result<MetricsReport> {
    let (n, l) = (y.rows(), y.labels());
    if scores.shape() != [n, l] {
        return Err(Error::InvalidArgument(format!("scores {:?} for labels {n}×{l}", scores.shape())));
    }
    let mut report = MetricsReport {
        per_class_ap: vec![None; l],
        map: 0.0,
        per_class_precision: vec![None; l],
        per_class_recall: vec![None; l],
        per_class_f1: vec![None; l],
        cf1: 0.0,
        of1: 0.0,
        threshold,
        excluded_classes: 0,
    };
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut included = 0;
    for j in 0..l {
        let column: Vec<Real> = (0..n).map(|i| scores.at(&[i, j])).collect();
        let relevant: Vec<bool> = (0..n).map(|i| y.get(i, j)).collect();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (s, &r) in column.iter().zip(&relevant) {
            match (*s >= threshold, r) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        let ap = average_precision(&column, &relevant)?;
        if !ap.defined {
            report.excluded_classes += 1;
            continue;
        }
        included += 1;
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        report.per_class_ap[j] = Some(ap.value);
        report.per_class_precision[j] = Some(ratio(tp, tp + fp));
        report.per_class_recall[j] = Some(ratio(tp, tp + fn_));
        report.per_class_f1[j] = Some(f1);
        report.map += ap.value;
        report.cf1 += f1;
    }
    if included > 0 {
        report.map /= included as Real;
        report.cf1 /= included as Real;
    }
    report.of1 = ratio(2 * tp_all, 2 * tp_all + fp_all + fn_all);
    Ok(report)
}

/// Predicts every image of `split` in chunks and scores the predictions.
pub fn evaluate(network: &Network, split: &Split, chunk: usize) -> Result<(MetricsReport, Tensor)> {
    let l = split.label_count();
    let mut probs = Vec::with_capacity(split.len() * l);
    let indices: Vec<usize> = (0..split.len()).collect();
    for part in indices.chunks(chunk.max(1)) {
        let batch = split.batch(part);
        probs.extend_from_slice(network.predict(&batch.images)?.data());
    }
    let probs = Tensor::new(&[split.len(), l], probs)?;
    Ok((metrics(&probs, split.labels(), 0.5)?, probs))
}

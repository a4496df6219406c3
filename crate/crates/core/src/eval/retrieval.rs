use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::tensor::{Real, Tensor};

/// Label-level embeddings (`M × L × D`) of a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub ids: Vec<usize>,
    pub embeddings: Tensor,
    pub labels: LabelMatrix,
}

impl Gallery {
    pub fn new(ids: Vec<usize>, embeddings: Tensor, labels: LabelMatrix) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 3 || s[0] != ids.len() || s[0] != labels.rows() || s[1] != labels.labels() {
            return Err(Error::InvalidArgument(format!(
                "gallery embeddings {s:?} for {} ids and {}×{} labels",
                ids.len(),
                labels.rows(),
                labels.labels()
            )));
        }
        Ok(Self { ids, embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn row(&self, entry: usize, label: usize) -> &[Real] {
        let (l, d) = (self.embeddings.shape()[1], self.embeddings.shape()[2]);
        &self.embeddings.data()[(entry * l + label) * d..(entry * l + label + 1) * d]
    }
}

/// A query image: its id, label-level embeddings (`L × D`), ground truth and
/// the labels whose embeddings form the query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: usize,
    pub embeddings: Tensor,
    pub truth: Vec<u8>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub id: usize,
    pub distance: Real,
    /// For single-label queries: the hit's label whose embedding lies closest to the query vector.
    pub nearest_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_id: usize,
    pub query_labels: Vec<usize>,
    /// Ascending by distance; ties keep gallery order.
    pub hits: Vec<Hit>,
}

fn euclidean(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
}

/// Ranks gallery images by Euclidean distance between the concatenated query
/// label rows and the same label rows of each gallery image. The query's own
/// id is excluded. Returns at most `k` hits.
pub fn retrieve(query: &Query, gallery: &Gallery, k: usize) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    let (l, d) = (gallery.embeddings.shape()[1], gallery.embeddings.shape()[2]);
    if query.embeddings.shape() != [l, d] || query.truth.len() != l {
        return Err(Error::InvalidArgument(format!(
            "query embeddings {:?} do not match gallery rows {l}×{d}",
            query.embeddings.shape()
        )));
    }
    if query.labels.is_empty() {
        return Err(Error::InvalidArgument("query needs at least one label".into()));
    }
    if let Some(&bad) = query.labels.iter().find(|&&j| j >= l) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {l} labels")));
    }
    if let Some(&bad) = query.labels.iter().find(|&&j| query.truth[j] != 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not active in query image {}", query.id)));
    }
    let qvec: Vec<Real> = query.labels.iter().flat_map(|&j| query.embeddings.row(j).iter().copied()).collect();
    let mut scored: Vec<(usize, Real)> = (0..gallery.len())
        .filter(|&e| gallery.ids[e] != query.id)
        .map(|e| {
            let gvec: Vec<Real> = query.labels.iter().flat_map(|&j| gallery.row(e, j).iter().copied()).collect();
            (e, euclidean(&qvec, &gvec))
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let single = query.labels.len() == 1;
    let hits = scored
        .into_iter()
        .take(k)
        .map(|(e, distance)| {
            let nearest_label = single.then(|| {
                (0..l)
                    .map(|j| (j, euclidean(&qvec, gallery.row(e, j))))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(j, _)| j)
                    .unwrap()
            });
            Hit { id: gallery.ids[e], distance, nearest_label }
        })
        .collect();
    Ok(RetrievalResult { query_id: query.id, query_labels: query.labels.clone(), hits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery() -> Gallery {
        let emb = Tensor::new(&[3, 2, 2], vec![0.0, 0.0, 1.0, 1.0, 0.1, 0.0, 5.0, 5.0, 3.0, 3.0, 1.0, 1.2]).unwrap();
        let labels = LabelMatrix::from_rows(&[[1, 1], [1, 0], [1, 1]]).unwrap();
        Gallery::new(vec![10, 11, 12], emb, labels).unwrap()
    }

    fn query(labels: Vec<usize>) -> Query {
        Query { id: 99, embeddings: Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(), truth: vec![1, 1], labels }
    }

    #[test]
    fn duplicate_ranks_first_at_zero_distance() {
        let r = retrieve(&query(vec![0]), &gallery(), 2).unwrap();
        assert_eq!(r.hits[0].id, 10);
        assert_eq!(r.hits[0].distance, 0.0);
        assert_eq!(r.hits[0].nearest_label, Some(0));
    }

    #[test]
    fn k_beyond_gallery_returns_everything() {
        let r = retrieve(&query(vec![0, 1]), &gallery(), 50).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert!(r.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert!(r.hits.iter().all(|h| h.nearest_label.is_none()));
    }

    #[test]
    fn own_id_is_excluded() {
        let mut q = query(vec![1]);
        q.id = 10;
        let r = retrieve(&q, &gallery(), 10).unwrap();
        assert!(r.hits.iter().all(|h| h.id != 10));
    }

    #[test]
    fn invalid_queries_are_rejected() {
        assert!(retrieve(&query(vec![2]), &gallery(), 1).is_err());
        assert!(retrieve(&query(vec![]), &gallery(), 1).is_err());
        let mut q = query(vec![1]);
        q.truth = vec![1, 0];
        assert!(retrieve(&q, &gallery(), 1).is_err());
        let empty = Gallery {
            ids: vec![],
            embeddings: Tensor::zeros(&[1, 2, 2]),
            labels: LabelMatrix::zeros(0, 2),
        };
        assert!(retrieve(&query(vec![0]), &empty, 1).is_err());
    }
}

//! Classification and contrastive objectives.
//!
//! Conventions: the BCE loss is the negated log-likelihood averaged over
//! images; contrastive losses average over anchors that have at least one
//! positive. Anchors without positives contribute nothing and are counted.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMatrix;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: Real = 1e-7;
pub const DEFAULT_TEMPERATURE: Real = 0.2;
pub const DEFAULT_GAMMA: Real = 0.1;

/// `-(1/N) Σ_i Σ_j [y_ij log s_ij + (1 - y_ij) log(1 - s_ij)]`.
pub fn bce_loss(tape: &mut Tape, probs: Var, y: &LabelMatrix) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s != [y.rows(), y.labels()] {
        return shape_err("bce_loss", format!("probabilities {s:?} vs labels {}×{}", y.rows(), y.labels()));
    }
    let targets = Tensor::from_parts(s.clone(), y.to_reals());
    let complement = Tensor::from_parts(s, y.to_reals().iter().map(|v| 1.0 - v).collect());
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    let t = tape.constant(targets);
    let c = tape.constant(complement);
    let pos = tape.mul(log_p, t)?;
    let neg = tape.mul(log_q, c)?;
    let ll = tape.add(pos, neg)?;
    let total = tape.sum(ll)?;
    tape.scale(total, -1.0 / y.rows() as Real)
}

/// Anchor/positive bookkeeping over the active (image, label) pairs of a batch.
///
/// `anchors` lists every `(i, j)` with `y_ij = 1`, row-major. For anchor `a`,
/// `positives[a]` holds the indices (into `anchors`) of `(k, j)` with `k ≠ i`;
/// the denominator set is every other anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorIndex {
    pub labels: usize,
    pub anchors: Vec<(usize, usize)>,
    pub positives: Vec<Vec<usize>>,
}

impl AnchorIndex {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Indices of `A(a)`: every anchor except `a`.
    pub fn candidates(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.anchors.len()).filter(move |&b| b != a)
    }

    /// Flat row of anchor `a` in an `(N·L) × d` view of the embeddings.
    pub fn flat_row(&self, a: usize) -> usize {
        let (i, j) = self.anchors[a];
        i * self.labels + j
    }
}

pub fn build_anchor_sets(y: &LabelMatrix) -> AnchorIndex {
    let anchors: Vec<(usize, usize)> =
        (0..y.rows()).flat_map(|i| (0..y.labels()).map(move |j| (i, j))).filter(|&(i, j)| y.get(i, j)).collect();
    let positives = anchors
        .iter()
        .map(|&(i, j)| {
            anchors.iter().enumerate().filter(|&(_, &(k, l))| l == j && k != i).map(|(b, _)| b).collect()
        })
        .collect();
    AnchorIndex { labels: y.labels(), anchors, positives }
}

/// Contrastive statistics of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorCounts {
    pub total: usize,
    pub skipped: usize,
}

/// Supervised contrastive loss over rows of `emb[M×d]` with explicit positive sets;
/// every other row is in the denominator.
fn contrastive_rows(tape: &mut Tape, emb: Var, positives: &[Vec<usize>], tau: Real) -> Result<(Var, AnchorCounts)> {
    let m = positives.len();
    let skipped = positives.iter().filter(|p| p.is_empty()).count();
    let counts = AnchorCounts { total: m, skipped };
    let contributing = m - skipped;
    if contributing == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), counts));
    }
    let et = tape.transpose(emb)?;
    let sim = tape.matmul(emb, et)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let include: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let log_prob = tape.masked_log_softmax(logits, include)?;
    let mut weights = vec![0.0; m * m];
    for (a, pos) in positives.iter().enumerate() {
        for &p in pos {
            weights[a * m + p] = -1.0 / (pos.len() * contributing) as Real;
        }
    }
    let w = tape.constant(Tensor::from_parts(vec![m, m], weights));
    let weighted = tape.mul(log_prob, w)?;
    Ok((tape.sum(weighted)?, counts))
}

fn check_temperature(tau: Real) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Multi-label contrastive loss over projected label-level embeddings `z[N×L×d_z]`.
pub fn mulcon_con_loss(tape: &mut Tape, z: Var, idx: &AnchorIndex, tau: Real) -> Result<(Var, AnchorCounts)> {
    check_temperature(tau)?;
    let s = tape.shape(z).to_vec();
    if s.len() != 3 || s[1] != idx.labels || idx.anchors.iter().any(|&(i, _)| i >= s[0]) {
        return shape_err("mulcon_con_loss", format!("embeddings {s:?} for {} labels", idx.labels));
    }
    if idx.len() < 2 {
        return Ok((tape.constant(Tensor::scalar(0.0)), AnchorCounts { total: idx.len(), skipped: idx.len() }));
    }
    let flat = tape.reshape(z, &[s[0] * s[1], s[2]])?;
    let rows: Vec<usize> = (0..idx.len()).map(|a| idx.flat_row(a)).collect();
    let active = tape.index_rows(flat, &rows)?;
    contrastive_rows(tape, active, &idx.positives, tau)
}

/// Image-level supervised contrastive loss; image `k` is a positive of `i`
/// when the two share at least one active label.
pub fn supcon_image_loss(tape: &mut Tape, z: Var, y: &LabelMatrix, tau: Real) -> Result<(Var, AnchorCounts)> {
    check_temperature(tau)?;
    let s = tape.shape(z).to_vec();
    if s.len() != 2 || s[0] != y.rows() {
        return shape_err("supcon_image_loss", format!("embeddings {s:?} for {} images", y.rows()));
    }
    let n = y.rows();
    let positives: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&k| k != i && y.shared(i, k) >= 1).collect()).collect();
    if n < 2 {
        return Ok((tape.constant(Tensor::scalar(0.0)), AnchorCounts { total: n, skipped: n }));
    }
    contrastive_rows(tape, z, &positives, tau)
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: Real,
    pub con: Real,
    pub combined: Real,
    pub anchors_total: usize,
    pub anchors_skipped: usize,
}

/// `combined = bce + γ · con`.
pub fn combined_loss(bce: Real, con: Real, gamma: Real, counts: AnchorCounts) -> Result<LossReport> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
    }
    Ok(LossReport { bce, con, combined: bce + gamma * con, anchors_total: counts.total, anchors_skipped: counts.skipped })
}

/// Records `bce + γ · con` on the tape and returns the loss with its report.
pub fn combine_on_tape(tape: &mut Tape, bce: Var, con: Var, gamma: Real, counts: AnchorCounts) -> Result<(Var, LossReport)> {
    let scaled = tape.scale(con, gamma)?;
    let loss = tape.add(bce, scaled)?;
    let report = combined_loss(tape.value(bce).item(), tape.value(con).item(), gamma, counts)?;
    Ok((loss, report))
}

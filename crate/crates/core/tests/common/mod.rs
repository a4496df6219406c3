//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use mulcon::labels::LabelMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_labels(rows: usize, labels: usize, p: f64, rng: &mut ChaCha8Rng) -> LabelMatrix {
    let mut y = LabelMatrix::zeros(rows, labels);
    for i in 0..rows {
        for j in 0..labels {
            y.set(i, j, rng.random_bool(p));
        }
    }
    y
}

pub fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = uniform_vec(rows * d, -1.0, 1.0, rng);
    for row in v.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Triple-loop `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct cross-correlation; shapes `[n, cin, h, w]` and `[cout, cin, kh, kw]`.
pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x[((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax(Q Kᵀ [/ sqrt(d)]) V` by explicit sums.
pub fn att(q: &[f64], k: &[f64], v: &[f64], nq: usize, nv: usize, d: usize, dv: usize, scaled: bool) -> Vec<f64> {
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let logits: Vec<f64> = (0..nv)
            .map(|r| (0..d).map(|t| q[i * d + t] * k[r * d + t]).sum::<f64>() * scale)
            .collect();
        let w = softmax_row(&logits);
        for c in 0..dv {
            out[i * dv + c] = (0..nv).map(|r| w[r] * v[r * dv + c]).sum();
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-(1/N) Σ [y log s + (1-y) log(1-s)]` with clamping at 1e-7.
pub fn bce(s: &[f64], y: &LabelMatrix) -> f64 {
    let n = y.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..y.labels() {
            let p = s[i * y.labels() + j].clamp(1e-7, 1.0 - 1e-7);
            total += if y.get(i, j) { p.ln() } else { (1.0 - p).ln() };
        }
    }
    -total / n as f64
}

/// Anchor sets enumerated straight from their definitions: `I` is every active
/// (i, j); `P(i,j)` the active (k, j) with k ≠ i; `A(i,j)` is `I` without the anchor.
pub struct Sets {
    pub anchors: Vec<(usize, usize)>,
    pub positives: Vec<Vec<(usize, usize)>>,
    pub candidates: Vec<Vec<(usize, usize)>>,
}

pub fn anchor_sets(y: &LabelMatrix) -> Sets {
    let mut anchors = Vec::new();
    for i in 0..y.rows() {
        for j in 0..y.labels() {
            if y.get(i, j) {
                anchors.push((i, j));
            }
        }
    }
    let mut positives = Vec::new();
    let mut candidates = Vec::new();
    for &(i, j) in &anchors {
        let mut p = Vec::new();
        for k in 0..y.rows() {
            if k != i && y.get(k, j) {
                p.push((k, j));
            }
        }
        positives.push(p);
        candidates.push(anchors.iter().copied().filter(|&a| a != (i, j)).collect());
    }
    Sets { anchors, positives, candidates }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force multi-label contrastive loss; returns (loss, skipped anchors).
pub fn mulcon(z: &[f64], y: &LabelMatrix, d: usize, tau: f64) -> (f64, usize) {
    let l = y.labels();
    let row = |(i, j): (usize, usize)| &z[(i * l + j) * d..(i * l + j + 1) * d];
    let sets = anchor_sets(y);
    let mut total = 0.0;
    let mut contributing = 0;
    let mut skipped = 0;
    for (a, &anchor) in sets.anchors.iter().enumerate() {
        let pos = &sets.positives[a];
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        contributing += 1;
        let denom: f64 = sets.candidates[a].iter().map(|&b| (dot(row(anchor), row(b)) / tau).exp()).sum();
        let mut term = 0.0;
        for &p in pos {
            term += ((dot(row(anchor), row(p)) / tau).exp() / denom).ln();
        }
        total += -term / pos.len() as f64;
    }
    if contributing == 0 {
        return (0.0, skipped);
    }
    (total / contributing as f64, skipped)
}

/// Brute-force image-level supervised contrastive loss.
pub fn supcon(z: &[f64], y: &LabelMatrix, d: usize, tau: f64) -> (f64, usize) {
    let n = y.rows();
    let row = |i: usize| &z[i * d..(i + 1) * d];
    let shares = |a: usize, b: usize| (0..y.labels()).any(|j| y.get(a, j) && y.get(b, j));
    let mut total = 0.0;
    let mut contributing = 0;
    let mut skipped = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&k| k != i && shares(i, k)).collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        contributing += 1;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(row(i), row(k)) / tau).exp()).sum();
        let term: f64 = pos.iter().map(|&p| ((dot(row(i), row(p)) / tau).exp() / denom).ln()).sum();
        total += -term / pos.len() as f64;
    }
    if contributing == 0 {
        return (0.0, skipped);
    }
    (total / contributing as f64, skipped)
}

/// Average precision by explicit precision@k at every relevant rank.
pub fn average_precision(scores: &[f64], rel: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index among ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut precisions = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if rel[i] {
            let hits = order[..=k].iter().filter(|&&t| rel[t]).count();
            precisions.push(hits as f64 / (k + 1) as f64);
        }
    }
    if precisions.is_empty() {
        0.0
    } else {
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }
}

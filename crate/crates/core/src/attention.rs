//! Scaled/unscaled dot-product attention, multi-head attention and the
//! residual multi-head attention block used to produce label-level embeddings.
//!
//! Every function accepts either unbatched (`n × d`) or batched (`B × n × d`)
//! operands. In [`multi_att`] and [`multi_att_block`] an unbatched query may be
//! combined with batched keys/values; the projected query is then shared by
//! every batch entry.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamSet};
use crate::tensor::{Real, Tape, Var};

/// Projection weights of a multi-head attention block.
///
/// Heads project `C → D/h`; the output projection `W^o` and the block's
/// residual projection `W^{q'}` are `D × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Divide logits by `sqrt(D/h)` before the softmax.
    pub scaled: bool,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub wqp: ParamId,
}

impl MultiHeadParams {
    /// Registers `{prefix}.head{k}.{wq,wk,wv}`, `{prefix}.wo` and `{prefix}.wqp`.
    pub fn init(
        store: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        scaled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || out_dim % heads != 0 || in_dim == 0 {
            return shape_err("multi_head_params", format!("D={out_dim} not divisible into {heads} heads (C={in_dim})"));
        }
        let dh = out_dim / heads;
        let mut proj = |name: String| store.add(name, xavier_uniform(&[in_dim, dh], in_dim, dh, rng));
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..heads {
            wq.push(proj(format!("{prefix}.head{k}.wq")));
            wk.push(proj(format!("{prefix}.head{k}.wk")));
            wv.push(proj(format!("{prefix}.head{k}.wv")));
        }
        let wo = store.add(format!("{prefix}.wo"), xavier_uniform(&[out_dim, out_dim], out_dim, out_dim, rng));
        let wqp = store.add(format!("{prefix}.wqp"), xavier_uniform(&[out_dim, out_dim], out_dim, out_dim, rng));
        Ok(Self { heads, in_dim, out_dim, scaled, wq, wk, wv, wo, wqp })
    }

    pub fn head_dim(&self) -> usize {
        self.out_dim / self.heads
    }
}

/// Output of [`att`] together with its attention weights `ω(QKᵀ)`.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// Single attention `ω(QKᵀ)V` with a row-wise softmax ω.
pub fn att(tape: &mut Tape, q: Var, k: Var, v: Var, scaled: bool) -> Result<Var> {
    att_with_weights(tape, q, k, v, scaled).map(|a| a.output)
}

pub fn att_with_weights(tape: &mut Tape, q: Var, k: Var, v: Var, scaled: bool) -> Result<Attended> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let rank = sq.len();
    let ok = (rank == 2 || rank == 3)
        && sk.len() == rank
        && sv.len() == rank
        && sq[rank - 1] == sk[rank - 1]
        && sk[rank - 2] == sv[rank - 2]
        && (rank == 2 || (sq[0] == sk[0] && sk[0] == sv[0]));
    if !ok {
        return shape_err("att", format!("Q {sq:?}, K {sk:?}, V {sv:?}"));
    }
    let kt = tape.transpose(k)?;
    let mut logits = if rank == 2 { tape.matmul(q, kt)? } else { tape.bmm(q, kt)? };
    if scaled {
        logits = tape.scale(logits, 1.0 / (sq[rank - 1] as Real).sqrt())?;
    }
    let weights = tape.softmax(logits)?;
    let output = if rank == 2 { tape.matmul(weights, v)? } else { tape.bmm(weights, v)? };
    Ok(Attended { output, weights })
}

/// Intermediate values of a multi-head attention pass.
#[derive(Debug, Clone)]
pub struct MultiAttended {
    /// `concat(O_1..O_h) · W^o`.
    pub output: Var,
    /// `concat(QW^q_1, .., QW^q_h)`, broadcast to the batch when K/V are batched.
    pub query_proj: Var,
    /// Per-head attention weights.
    pub weights: Vec<Var>,
}

fn check_inputs(tape: &Tape, q: Var, k: Var, v: Var, p: &MultiHeadParams) -> Result<Option<usize>> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let width_ok = [sq, sk, sv].iter().all(|s| s.last() == Some(&p.in_dim));
    let rank_ok = matches!(sq.len(), 2 | 3) && matches!(sk.len(), 2 | 3) && sk.len() == sv.len();
    if !width_ok || !rank_ok || p.out_dim % p.heads != 0 {
        return shape_err(
            "multi_att",
            format!("Q {sq:?}, K {sk:?}, V {sv:?} for C={}, D={}, h={}", p.in_dim, p.out_dim, p.heads),
        );
    }
    if sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return shape_err("multi_att", format!("K {sk:?} and V {sv:?} disagree on rows"));
    }
    match (sq.len(), sk.len()) {
        (2, 2) => Ok(None),
        (2, 3) => Ok(Some(sk[0])),
        (3, 3) if sq[0] == sk[0] => Ok(Some(sk[0])),
        _ => shape_err("multi_att", format!("batched Q {sq:?} needs batched K {sk:?} of equal batch")),
    }
}

pub fn multi_att_parts(tape: &mut Tape, q: Var, k: Var, v: Var, p: &MultiHeadParams, vars: &Bound) -> Result<MultiAttended> {
    let batch = check_inputs(tape, q, k, v, p)?;
    let shared_query = tape.shape(q).len() == 2 && batch.is_some();
    let mut outputs = Vec::with_capacity(p.heads);
    let mut queries = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let mut qh = tape.linear(q, vars[p.wq[h]], None)?;
        if shared_query {
            qh = tape.broadcast(qh, batch.unwrap())?;
        }
        let kh = tape.linear(k, vars[p.wk[h]], None)?;
        let vh = tape.linear(v, vars[p.wv[h]], None)?;
        let a = att_with_weights(tape, qh, kh, vh, p.scaled)?;
        outputs.push(a.output);
        queries.push(qh);
        weights.push(a.weights);
    }
    let axis = tape.shape(outputs[0]).len() - 1;
    let cat = tape.concat(&outputs, axis)?;
    let output = tape.linear(cat, vars[p.wo], None)?;
    let query_proj = tape.concat(&queries, axis)?;
    Ok(MultiAttended { output, query_proj, weights })
}

/// `concat(O_1, .., O_h) W^o` with `O_k = att(Q W^q_k, K W^k_k, V W^v_k)`.
pub fn multi_att(tape: &mut Tape, q: Var, k: Var, v: Var, p: &MultiHeadParams, vars: &Bound) -> Result<Var> {
    multi_att_parts(tape, q, k, v, p, vars).map(|m| m.output)
}

/// Output of [`multi_att_block`] with the per-head attention weights it used.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `Q' + Q' W^{q'}` where `Q' = concat(Q W^q_1, .., Q W^q_h) + MultiAtt(Q, K, V)`.
pub fn multi_att_block(tape: &mut Tape, q: Var, k: Var, v: Var, p: &MultiHeadParams, vars: &Bound) -> Result<Var> {
    multi_att_block_with_weights(tape, q, k, v, p, vars).map(|b| b.output)
}

pub fn multi_att_block_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &MultiHeadParams,
    vars: &Bound,
) -> Result<BlockOutput> {
    let parts = multi_att_parts(tape, q, k, v, p, vars)?;
    let q_prime = tape.add(parts.query_proj, parts.output)?;
    let mixed = tape.linear(q_prime, vars[p.wqp], None)?;
    let output = tape.add(q_prime, mixed)?;
    Ok(BlockOutput { output, weights: parts.weights })
}

//! Central finite-difference checks of the tape gradients.
//!
//! Each case draws random inputs, reduces the op output to a scalar with a
//! random weighting and compares every input coordinate of the analytic
//! gradient with `(f(x+h) - f(x-h)) / 2h`. A perturbation that moves a
//! piecewise op (ReLU, clamp, max-pool) onto another branch is retried with a
//! smaller step; coordinates that still straddle a kink are counted, not scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{att, multi_att_block, MultiHeadParams};
use crate::data::{derive_seed, LabeledImageBatch};
use crate::error::Result;
use crate::labels::LabelMatrix;
use crate::losses::{bce_loss, build_anchor_sets, mulcon_con_loss, supcon_image_loss};
use crate::model::{BackboneModel, EncoderConfig, ModelConfig, MulConModel, Network};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::training::{loss_with_bound, PhaseSpec, TrainConfig, Variant};

pub const FD_STEP: Real = 1e-5;
pub const MAX_RELATIVE_ERROR: Real = 1e-4;
const FALLBACK_STEPS: [Real; 3] = [FD_STEP, 1e-6, 1e-7];

/// `|a - n| / max(1, |n|)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Result of checking one function at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointCheck {
    pub max_error: Real,
    pub coordinates: usize,
    pub kinks: usize,
}

type Objective<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor], f: &Objective) -> Result<(Real, u64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

/// Compares analytic and numeric gradients of scalar `f` with respect to every
/// element of every input.
pub fn check_gradients(inputs: &[Tensor], f: &Objective) -> Result<PointCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().requiring_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let signature = tape.branch_signature();
    let grads = tape.backward(out)?;
    let mut result = PointCheck::default();
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v, inputs[k].shape());
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            let mut numeric = None;
            for h in FALLBACK_STEPS {
                probe[k].data_mut()[e] = x0 + h;
                let (fp, sp) = evaluate(&probe, f)?;
                probe[k].data_mut()[e] = x0 - h;
                let (fm, sm) = evaluate(&probe, f)?;
                probe[k].data_mut()[e] = x0;
                if sp == signature && sm == signature {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => {
                    result.max_error = result.max_error.max(relative_error(analytic.data()[e], n));
                    result.coordinates += 1;
                }
                None => result.kinks += 1,
            }
        }
    }
    Ok(result)
}

/// Aggregate over the random instances of one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub kinks: usize,
    pub max_error: Real,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_error < MAX_RELATIVE_ERROR && self.coordinates > 0
    }
}

/// Random inputs plus the scalar function to differentiate.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Box<Objective<'static>>,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Instance>;

fn uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with magnitude in `[0.2, 1]` and random sign.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn random_labels(rows: usize, labels: usize, rng: &mut ChaCha8Rng) -> LabelMatrix {
    let mut y = LabelMatrix::zeros(rows, labels);
    for i in 0..rows {
        for j in 0..labels {
            y.set(i, j, rng.random::<bool>());
        }
    }
    y
}

/// `Σ out ⊙ r` with a fixed random `r`, turning any output into a scalar.
fn contract(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let m = tape.mul(out, c)?;
    tape.sum(m)
}

/// Wraps a tensor-valued op into an instance with a random output weighting.
fn op_instance(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Result<Instance> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = uniform(&shape, -1.0, 1.0, rng);
    Ok(Instance {
        inputs,
        f: Box::new(move |tape, vars| {
            let out = op(tape, vars)?;
            contract(tape, out, &r)
        }),
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let ins = vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.matmul(v[0], v[1]))
}

fn case_bmm(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let ins = vec![uniform(&[b, m, k], -1.0, 1.0, rng), uniform(&[b, k, n], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.bmm(v[0], v[1]))
}

fn case_transpose(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut shape = vec![dim(rng, 1, 4), dim(rng, 1, 4)];
    if rng.random::<bool>() {
        shape.insert(0, dim(rng, 1, 3));
    }
    let ins = vec![uniform(&shape, -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.transpose(v[0]))
}

fn case_broadcast(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let b = dim(rng, 1, 3);
    let ins = vec![uniform(&[dim(rng, 1, 4), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.broadcast(v[0], b))
}

fn case_linear(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (k, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let mut xs = vec![dim(rng, 1, 4), k];
    if rng.random::<bool>() {
        xs.insert(0, dim(rng, 1, 3));
    }
    let ins = vec![uniform(&xs, -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng), uniform(&[n], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng)]
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = two_same(rng);
    op_instance(rng, ins, |t, v| t.add(v[0], v[1]))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = two_same(rng);
    op_instance(rng, ins, |t, v| t.sub(v[0], v[1]))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = two_same(rng);
    op_instance(rng, ins, |t, v| t.mul(v[0], v[1]))
}

fn case_affine(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.affine(v[0], a, b))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let a = rng.random_range(-2.0..2.0);
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.scale(v[0], a))
}

fn case_add_bias(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = dim(rng, 1, 4);
    let ins = vec![uniform(&[dim(rng, 1, 3), n], -1.0, 1.0, rng), uniform(&[n], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.add_bias(v[0], v[1]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -3.0, 3.0, rng)];
    op_instance(rng, ins, |t, v| t.sigmoid(v[0]))
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![off_zero(&[dim(rng, 1, 3), dim(rng, 1, 4)], rng)];
    op_instance(rng, ins, |t, v| t.relu(v[0]))
}

fn case_log(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], 0.2, 2.0, rng)];
    op_instance(rng, ins, |t, v| t.log(v[0]))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -2.0, 2.0, rng)];
    op_instance(rng, ins, |t, v| t.exp(v[0]))
}

fn case_clamp(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.clamp(v[0], -0.5, 0.5))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.sum(v[0]))
}

fn case_mean(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.mean(v[0]))
}

fn case_sum_last(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.sum_last(v[0]))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 3), dim(rng, 1, 5)], -2.0, 2.0, rng)];
    op_instance(rng, ins, |t, v| t.softmax(v[0]))
}

fn case_masked_log_softmax(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random::<bool>()).collect();
    for r in 0..m {
        mask[r * n + rng.random_range(0..n)] = true;
    }
    let ins = vec![uniform(&[m, n], -2.0, 2.0, rng)];
    op_instance(rng, ins, move |t, v| t.masked_log_softmax(v[0], mask.clone()))
}

fn case_normalize_rows(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![off_zero(&[dim(rng, 1, 4), dim(rng, 1, 4)], rng)];
    op_instance(rng, ins, |t, v| t.normalize_rows(v[0], 1e-12))
}

fn case_reshape(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 4));
    let ins = vec![uniform(&[a, b], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.reshape(v[0], &[b, a]))
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let axis = rng.random_range(0..3);
    let mut shapes = vec![[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)]; 3];
    for s in shapes.iter_mut() {
        s[axis] = dim(rng, 1, 3);
    }
    let ins = shapes.iter().map(|s| uniform(s, -1.0, 1.0, rng)).collect();
    op_instance(rng, ins, move |t, v| t.concat(v, axis))
}

fn case_narrow(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = [dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 4)];
    let axis = rng.random_range(0..3);
    let start = rng.random_range(0..shape[axis]);
    let len = rng.random_range(1..=shape[axis] - start);
    let ins = vec![uniform(&shape, -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.narrow(v[0], axis, start, len))
}

fn case_index_rows(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let rows: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..m)).collect();
    let ins = vec![uniform(&[m, n], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.index_rows(v[0], &rows))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
    let k = dim(rng, 1, 3);
    let (stride, pad) = (dim(rng, 1, 2), rng.random_range(0..=1));
    let ins = vec![uniform(&[n, cin, h, w], -1.0, 1.0, rng), uniform(&[cout, cin, k, k], -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| t.conv2d(v[0], v[1], stride, pad))
}

fn case_add_channel_bias(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let c = dim(rng, 1, 3);
    let ins = vec![uniform(&[dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 1, 3)], -1.0, 1.0, rng), uniform(&[c], -1.0, 1.0, rng)];
    op_instance(rng, ins, |t, v| t.add_channel_bias(v[0], v[1]))
}

fn case_max_pool2d(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let ins = vec![uniform(&[dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 2, 6), dim(rng, 2, 6)], -1.0, 1.0, rng)];
    let stride = dim(rng, 1, 2);
    op_instance(rng, ins, move |t, v| t.max_pool2d(v[0], 2, stride))
}

fn case_att(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (nq, nv, d) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    let dv = dim(rng, 1, 4);
    let scaled = rng.random::<bool>();
    let mut lead = vec![];
    if rng.random::<bool>() {
        lead.push(dim(rng, 1, 3));
    }
    let sh = |a: usize, b: usize| [lead.as_slice(), &[a, b]].concat();
    let ins = vec![uniform(&sh(nq, d), -1.0, 1.0, rng), uniform(&sh(nv, d), -1.0, 1.0, rng), uniform(&sh(nv, dv), -1.0, 1.0, rng)];
    op_instance(rng, ins, move |t, v| att(t, v[0], v[1], v[2], scaled))
}

fn case_multi_att_block(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let heads = dim(rng, 1, 3);
    let (c, d) = (dim(rng, 1, 4), heads * dim(rng, 1, 2));
    let (nq, nv, b) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 2));
    let mut store = ParamSet::new();
    let p = MultiHeadParams::init(&mut store, "mab", c, d, heads, rng.random::<bool>(), rng)?;
    let shared_query = rng.random::<bool>();
    let q = if shared_query { uniform(&[nq, c], -1.0, 1.0, rng) } else { uniform(&[b, nq, c], -1.0, 1.0, rng) };
    let mut ins = vec![q, uniform(&[b, nv, c], -1.0, 1.0, rng)];
    ins.extend(store.iter().map(|(_, t)| Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())));
    op_instance(rng, ins, move |t, v| {
        let bound = Bound::from_vars(v[2..].to_vec());
        multi_att_block(t, v[0], v[1], v[1], &p, &bound)
    })
}

fn case_bce(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (n, l) = (dim(rng, 1, 5), dim(rng, 1, 4));
    let y = random_labels(n, l, rng);
    let ins = vec![uniform(&[n, l], -3.0, 3.0, rng)];
    Ok(Instance {
        inputs: ins,
        f: Box::new(move |t, v| {
            let p = t.sigmoid(v[0])?;
            bce_loss(t, p, &y)
        }),
    })
}

fn case_mulcon(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (n, l, d) = (dim(rng, 2, 5), dim(rng, 1, 4), dim(rng, 1, 6));
    let y = random_labels(n, l, rng);
    let idx = build_anchor_sets(&y);
    let tau = rng.random_range(0.1..1.0);
    let ins = vec![off_zero(&[n, l, d], rng)];
    Ok(Instance {
        inputs: ins,
        f: Box::new(move |t, v| {
            let z = t.normalize_rows(v[0], 1e-12)?;
            Ok(mulcon_con_loss(t, z, &idx, tau)?.0)
        }),
    })
}

fn case_supcon(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (n, l, d) = (dim(rng, 2, 5), dim(rng, 1, 4), dim(rng, 1, 6));
    let y = random_labels(n, l, rng);
    let tau = rng.random_range(0.1..1.0);
    let ins = vec![off_zero(&[n, d], rng)];
    Ok(Instance {
        inputs: ins,
        f: Box::new(move |t, v| {
            let z = t.normalize_rows(v[0], 1e-12)?;
            Ok(supcon_image_loss(t, z, &y, tau)?.0)
        }),
    })
}

/// L=3, C=8, D=8, h=2, d_z=4 on 16×16 images.
fn tiny_config(variant: Variant, rng: &mut ChaCha8Rng) -> TrainConfig {
    let mut cfg = TrainConfig { variant, gamma: rng.random_range(0.05..1.0), ..TrainConfig::default() };
    cfg.model = ModelConfig {
        labels: 3,
        encoder: EncoderConfig { height: 16, width: 16, channels: vec![4, 8] },
        embed_dim: 8,
        heads: 2,
        proj_dim: 4,
        scaled_attention: true,
        query_init_std: 0.5,
    };
    cfg
}

/// Combined BCE + γ·contrastive loss of a whole small network, differentiated
/// with respect to every parameter.
fn end_to_end(rng: &mut ChaCha8Rng, variant: Variant) -> Result<Instance> {
    let cfg = tiny_config(variant, rng);
    let seed = rng.random();
    let mut network = match variant {
        Variant::BackboneBceScl => Network::Backbone(BackboneModel::init(&cfg.model, seed)?),
        _ => Network::MulCon(MulConModel::init(&cfg.model, seed)?),
    };
    // nonzero biases keep the projection away from the zero vector, where
    // normalization is singular
    let params = network.params_mut();
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".b") {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = uniform(&shape, -0.2, 0.2, rng);
        }
    }
    let n = dim(rng, 3, 4);
    let mut labels = random_labels(n, cfg.model.labels, rng);
    for i in 0..n {
        labels.set(i, 0, true);
    }
    let batch = LabeledImageBatch {
        images: uniform(&[n, 3, 16, 16], 0.0, 1.0, rng),
        labels,
        ids: (0..n).collect(),
    };
    let spec = PhaseSpec::finetune(&cfg);
    let inputs: Vec<Tensor> = network.params().export().into_iter().map(|(_, t)| t).collect();
    Ok(Instance {
        inputs,
        f: Box::new(move |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            Ok(loss_with_bound(&network, &batch, &spec, tape, &bound)?.0)
        }),
    })
}

fn case_end_to_end_mulcon(rng: &mut ChaCha8Rng) -> Result<Instance> {
    end_to_end(rng, Variant::MulconFull)
}

fn case_end_to_end_backbone(rng: &mut ChaCha8Rng) -> Result<Instance> {
    end_to_end(rng, Variant::BackboneBceScl)
}

/// Every checked case, in report order.
pub const CASES: &[(&str, Builder)] = &[
    ("matmul", case_matmul),
    ("bmm", case_bmm),
    ("transpose", case_transpose),
    ("broadcast", case_broadcast),
    ("linear", case_linear),
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("affine", case_affine),
    ("scale", case_scale),
    ("add_bias", case_add_bias),
    ("sigmoid", case_sigmoid),
    ("relu", case_relu),
    ("log", case_log),
    ("exp", case_exp),
    ("clamp", case_clamp),
    ("sum", case_sum),
    ("mean", case_mean),
    ("sum_last", case_sum_last),
    ("softmax", case_softmax),
    ("masked_log_softmax", case_masked_log_softmax),
    ("normalize_rows", case_normalize_rows),
    ("reshape", case_reshape),
    ("concat", case_concat),
    ("narrow", case_narrow),
    ("index_rows", case_index_rows),
    ("conv2d", case_conv2d),
    ("add_channel_bias", case_add_channel_bias),
    ("max_pool2d", case_max_pool2d),
    ("att", case_att),
    ("multi_att_block", case_multi_att_block),
    ("bce_loss", case_bce),
    ("mulcon_con_loss", case_mulcon),
    ("supcon_image_loss", case_supcon),
    ("end_to_end_mulcon", case_end_to_end_mulcon),
    ("end_to_end_backbone", case_end_to_end_backbone),
];

/// Runs one case on `instances` random draws.
pub fn run_case(name: &str, build: Builder, instances: usize, seed: u64) -> Result<CaseReport> {
    let mut report = CaseReport { name: name.to_string(), instances, coordinates: 0, kinks: 0, max_error: 0.0 };
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64]));
        let inst = build(&mut rng)?;
        let r = check_gradients(&inst.inputs, inst.f.as_ref())?;
        report.coordinates += r.coordinates;
        report.kinks += r.kinks;
        report.max_error = report.max_error.max(r.max_error);
    }
    Ok(report)
}

/// Runs every case in [`CASES`].
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, &(name, build))| run_case(name, build, instances, derive_seed(&[seed, i as u64])))
        .collect()
}

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: Real,
    pub weight_decay: Real,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

/// SGD with momentum; weight decay is added to the gradient before the momentum update.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    step: u64,
    velocity: Vec<Vec<Real>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn tag(self) -> u8 {
        match self {
            OptimizerKind::Adam => 1,
            OptimizerKind::Sgd => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

fn buffers(sizes: &[usize]) -> Vec<Vec<Real>> {
    sizes.iter().map(|&n| vec![0.0; n]).collect()
}

fn round_f32(x: &mut [Real]) {
    x.iter_mut().for_each(|v| *v = *v as f32 as Real);
}

/// Pairs each parameter with its state slot, checking count and sizes.
fn checked<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    slots: usize,
) -> Result<Vec<&'a mut Tensor>> {
    let params: Vec<_> = params.into_iter().collect();
    if params.len() != slots {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {slots} parameters, step received {}",
            params.len()
        )));
    }
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::InvalidArgument("parameter without gradient buffer".into()));
    }
    Ok(params)
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self { config, step: 0, m: buffers(sizes), v: buffers(sizes) }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: Real) -> Result<()> {
        let params = checked(params, self.m.len())?;
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked").to_vec();
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + weight_decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Sgd {
    pub fn new(config: SgdConfig, sizes: &[usize]) -> Self {
        Self { config, step: 0, velocity: buffers(sizes) }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: Real) -> Result<()> {
        let params = checked(params, self.velocity.len())?;
        self.step += 1;
        let SgdConfig { momentum, weight_decay } = self.config;
        for (p, vel) in params.into_iter().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked").to_vec();
            for ((w, g), b) in p.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g + weight_decay * *w;
                *b = momentum * *b + g;
                *w -= lr * *b;
            }
        }
        Ok(())
    }
}

impl Optimizer {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::Adam(a) => a.step,
            Optimizer::Sgd(s) => s.step,
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: Real) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, lr),
            Optimizer::Sgd(s) => s.step(params, lr),
        }
    }

    /// Rounds every state buffer to the nearest 32-bit float.
    pub fn round_state_f32(&mut self) {
        match self {
            Optimizer::Adam(a) => a.m.iter_mut().chain(a.v.iter_mut()).for_each(|b| round_f32(b)),
            Optimizer::Sgd(s) => s.velocity.iter_mut().for_each(|b| round_f32(b)),
        }
    }

    /// State buffers as named tensors, e.g. `adam.m.<param>`.
    pub fn export_state(&self, names: &[&str], shapes: &[&[usize]]) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut emit = |prefix: &str, bufs: &[Vec<Real>]| {
            for ((name, shape), buf) in names.iter().zip(shapes).zip(bufs) {
                out.push((format!("{prefix}.{name}"), Tensor::from_parts(shape.to_vec(), buf.clone())));
            }
        };
        match self {
            Optimizer::Adam(a) => {
                emit("adam.m", &a.m);
                emit("adam.v", &a.v);
            }
            Optimizer::Sgd(s) => emit("sgd.velocity", &s.velocity),
        }
        out
    }

    /// Restores the step counter and buffers written by [`Optimizer::export_state`].
    pub fn import_state(&mut self, step: u64, names: &[&str], state: &[(String, Tensor)]) -> Result<()> {
        let lookup = |key: String, expected: usize| -> Result<Vec<Real>> {
            let (_, t) = state
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Format(format!("optimizer buffer `{key}` missing")))?;
            if t.numel() != expected {
                return Err(Error::TensorMismatch { name: key, expected: vec![expected], found: t.shape().to_vec() });
            }
            Ok(t.data().to_vec())
        };
        match self {
            Optimizer::Adam(a) => {
                for (i, name) in names.iter().enumerate() {
                    a.m[i] = lookup(format!("adam.m.{name}"), a.m[i].len())?;
                    a.v[i] = lookup(format!("adam.v.{name}"), a.v[i].len())?;
                }
                a.step = step;
            }
            Optimizer::Sgd(s) => {
                for (i, name) in names.iter().enumerate() {
                    s.velocity[i] = lookup(format!("sgd.velocity.{name}"), s.velocity[i].len())?;
                }
                s.step = step;
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules indexed by optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant { lr: Real, total_steps: usize },
    /// Cosine warmup from `max_lr / 25` to `max_lr` over the first 30% of steps,
    /// then cosine annealing down to `max_lr / 1e4` at the final step.
    OneCycle { max_lr: Real, total_steps: usize },
    /// `initial * factor^floor(epoch / period_epochs)`.
    StepDecay { initial: Real, factor: Real, period_epochs: usize, steps_per_epoch: usize, total_steps: usize },
}

pub const ONE_CYCLE_WARMUP_FRACTION: Real = 0.3;
pub const ONE_CYCLE_START_DIV: Real = 25.0;
pub const ONE_CYCLE_FINAL_DIV: Real = 1e4;

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        match *self {
            LrSchedule::Constant { total_steps, .. }
            | LrSchedule::OneCycle { total_steps, .. }
            | LrSchedule::StepDecay { total_steps, .. } => total_steps,
        }
    }

    /// Step at which the one-cycle schedule reaches its maximum.
    pub fn one_cycle_peak(total_steps: usize) -> usize {
        (ONE_CYCLE_WARMUP_FRACTION * total_steps as Real).floor() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<Real> {
        let total = self.total_steps();
        if step >= total {
            return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total} steps")));
        }
        let lr = match *self {
            LrSchedule::Constant { lr, .. } => lr,
            LrSchedule::OneCycle { max_lr, total_steps } => {
                let peak = Self::one_cycle_peak(total_steps);
                let cos_interp = |from: Real, to: Real, frac: Real| {
                    to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
                };
                if step < peak {
                    cos_interp(max_lr / ONE_CYCLE_START_DIV, max_lr, step as Real / peak as Real)
                } else {
                    let span = total_steps - 1 - peak;
                    let frac = if span == 0 { 0.0 } else { (step - peak) as Real / span as Real };
                    cos_interp(max_lr, max_lr / ONE_CYCLE_FINAL_DIV, frac)
                }
            }
            LrSchedule::StepDecay { initial, factor, period_epochs, steps_per_epoch, .. } => {
                let epoch = step / steps_per_epoch.max(1);
                initial * factor.powi((epoch / period_epochs.max(1)) as i32)
            }
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("schedule produced learning rate {lr}")));
        }
        Ok(lr)
    }
}

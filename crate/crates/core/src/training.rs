//! Two-step training: BCE pretraining with Adam and a one-cycle schedule, then
//! contrastive finetuning (BCE + γ·contrastive) with SGD and step decay on
//! augmented-pair batches. [`run_variant`] dispatches the ablation variants.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, AugmentConfig, BatchPlan, GlyphDatasetConfig, LabeledImageBatch, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{bce_loss, build_anchor_sets, combine_on_tape, mulcon_con_loss, supcon_image_loss, AnchorCounts, LossReport};
use crate::model::{BackboneModel, ModelConfig, MulConModel, Network};
use crate::params::{Bound, ParamId};
use crate::tensor::{Adam, AdamConfig, Checkpoint, LrSchedule, Optimizer, OptimizerKind, OptimizerSection, Real, Sgd, SgdConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BackboneBce,
    BackboneBceScl,
    MulconBceOnly,
    MulconNoPretrain,
    MulconFull,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::BackboneBce, Variant::BackboneBceScl, Variant::MulconBceOnly, Variant::MulconNoPretrain, Variant::MulconFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BackboneBce => "backbone-bce",
            Variant::BackboneBceScl => "backbone-bce-scl",
            Variant::MulconBceOnly => "mulcon-bce-only",
            Variant::MulconNoPretrain => "mulcon-no-pretrain",
            Variant::MulconFull => "mulcon-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    fn uses_backbone(self) -> bool {
        matches!(self, Variant::BackboneBce | Variant::BackboneBceScl)
    }

    fn runs_pretrain(self) -> bool {
        !matches!(self, Variant::MulconNoPretrain)
    }

    fn runs_finetune(self) -> bool {
        matches!(self, Variant::BackboneBceScl | Variant::MulconNoPretrain | Variant::MulconFull)
    }
}

/// First step: BCE only, Adam with a one-cycle schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: Real,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, max_lr: 2e-4, adam: AdamConfig::default() }
    }
}

/// Second step: BCE + γ·contrastive, SGD with step decay, augmented pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Images sampled per step; the loss sees twice as many with `augmented_pair`.
    pub batch_size: usize,
    pub lr: Real,
    pub decay_factor: Real,
    pub decay_every_epochs: usize,
    pub sgd: SgdConfig,
    pub augmented_pair: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.001,
            decay_factor: 0.1,
            decay_every_epochs: 20,
            sgd: SgdConfig::default(),
            augmented_pair: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub data: GlyphDatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub temperature: Real,
    pub gamma: Real,
    pub augment: AugmentConfig,
    /// Evaluate on the test split every this many epochs (0: only after each step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MulconFull,
            seed: 0,
            data: GlyphDatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            temperature: 0.2,
            gamma: 0.1,
            augment: AugmentConfig::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.labels != self.data.labels {
            return Err(Error::Config(format!(
                "model has {} labels, dataset {}",
                self.model.labels, self.data.labels
            )));
        }
        if (self.model.encoder.height, self.model.encoder.width) != (self.data.height, self.data.width) {
            return Err(Error::Config("model input size differs from dataset image size".into()));
        }
        let positive = [self.pretrain.max_lr, self.finetune.lr, self.finetune.decay_factor, self.temperature];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning rates, decay factor and temperature must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Bce,
    /// BCE + γ · multi-label contrastive loss on label-level embeddings.
    BceMulCon,
    /// BCE + γ · image-level supervised contrastive loss on pooled features.
    BceSupCon,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub bce: Real,
    pub con: Real,
    pub combined: Real,
    pub lr: Real,
    pub anchors_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub phase: Phase,
    pub epoch: usize,
    pub map: Real,
    pub cf1: Real,
    pub of1: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
    pub final_metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl RunLog {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            steps: Vec::new(),
            evals: Vec::new(),
            final_metrics: None,
            wall_clock_secs: 0.0,
            checkpoints: Vec::new(),
        }
    }
}

/// Everything a training phase needs besides the network and data.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub objective: Objective,
    pub epochs: usize,
    pub plan: BatchPlan,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub sgd: SgdConfig,
    pub gamma: Real,
    pub temperature: Real,
    max_lr: Real,
    decay: (Real, usize),
}

impl PhaseSpec {
    pub fn pretrain(cfg: &TrainConfig) -> Self {
        Self {
            phase: Phase::Pretrain,
            objective: Objective::Bce,
            epochs: cfg.pretrain.epochs,
            plan: BatchPlan {
                batch_size: cfg.pretrain.batch_size,
                seed: derive_seed(&[cfg.seed, 2]),
                augmented_pair: false,
                light: AugmentConfig { max_shift: 0, noise_std: 0.0, ..cfg.augment.clone() },
                strong: cfg.augment.clone(),
            },
            optimizer: OptimizerKind::Adam,
            adam: cfg.pretrain.adam,
            sgd: cfg.finetune.sgd,
            gamma: cfg.gamma,
            temperature: cfg.temperature,
            max_lr: cfg.pretrain.max_lr,
            decay: (1.0, 1),
        }
    }

    pub fn finetune(cfg: &TrainConfig) -> Self {
        let objective = if cfg.variant.uses_backbone() { Objective::BceSupCon } else { Objective::BceMulCon };
        Self {
            phase: Phase::Finetune,
            objective,
            epochs: cfg.finetune.epochs,
            plan: BatchPlan {
                batch_size: cfg.finetune.batch_size,
                seed: derive_seed(&[cfg.seed, 3]),
                augmented_pair: cfg.finetune.augmented_pair,
                light: AugmentConfig { max_shift: 0, noise_std: 0.0, ..cfg.augment.clone() },
                strong: cfg.augment.clone(),
            },
            optimizer: OptimizerKind::Sgd,
            adam: cfg.pretrain.adam,
            sgd: cfg.finetune.sgd,
            gamma: cfg.gamma,
            temperature: cfg.temperature,
            max_lr: cfg.finetune.lr,
            decay: (cfg.finetune.decay_factor, cfg.finetune.decay_every_epochs),
        }
    }

    pub fn steps_per_epoch(&self, split_len: usize) -> usize {
        self.plan.batches_per_epoch(split_len)
    }

    pub fn schedule(&self, split_len: usize) -> LrSchedule {
        let steps_per_epoch = self.steps_per_epoch(split_len);
        let total_steps = steps_per_epoch * self.epochs;
        match self.optimizer {
            OptimizerKind::Adam => LrSchedule::OneCycle { max_lr: self.max_lr, total_steps },
            OptimizerKind::Sgd => LrSchedule::StepDecay {
                initial: self.max_lr,
                factor: self.decay.0,
                period_epochs: self.decay.1,
                steps_per_epoch,
                total_steps,
            },
        }
    }

    /// Parameters updated in this phase: the projector only joins when a
    /// contrastive loss feeds it.
    pub fn trainable(&self, network: &Network) -> Vec<ParamId> {
        let frozen = if self.objective == Objective::Bce { network.projector_ids() } else { Vec::new() };
        network.params().ids().filter(|id| !frozen.contains(id)).collect()
    }
}

/// Forward pass and loss for one batch.
pub fn batch_loss(network: &Network, batch: &LabeledImageBatch, spec: &PhaseSpec, tape: &mut Tape) -> Result<(Var, LossReport, Bound)> {
    let vars = network.params().bind(tape);
    let (loss, report) = loss_with_bound(network, batch, spec, tape, &vars)?;
    Ok((loss, report, vars))
}

/// [`batch_loss`] against parameters already recorded on the tape.
pub fn loss_with_bound(network: &Network, batch: &LabeledImageBatch, spec: &PhaseSpec, tape: &mut Tape, vars: &Bound) -> Result<(Var, LossReport)> {
    let x = tape.constant(batch.images.clone());
    let contrastive = spec.objective != Objective::Bce;
    let (probs, con) = match (network, spec.objective) {
        (Network::MulCon(m), Objective::Bce | Objective::BceMulCon) => {
            let fw = m.forward(tape, vars, x, contrastive)?;
            let con = match fw.projected {
                Some(z) => Some(mulcon_con_loss(tape, z, &build_anchor_sets(&batch.labels), spec.temperature)?),
                None => None,
            };
            (fw.probs, con)
        }
        (Network::Backbone(m), Objective::Bce | Objective::BceSupCon) => {
            let fw = m.forward(tape, vars, x, contrastive)?;
            let con = match fw.projected {
                Some(z) => Some(supcon_image_loss(tape, z, &batch.labels, spec.temperature)?),
                None => None,
            };
            (fw.probs, con)
        }
        _ => return Err(Error::Config(format!("objective {:?} does not apply to this network", spec.objective))),
    };
    let bce = bce_loss(tape, probs, &batch.labels)?;
    let (con, counts) = con.unwrap_or_else(|| (tape.constant(Tensor::scalar(0.0)), AnchorCounts::default()));
    combine_on_tape(tape, bce, con, spec.gamma, counts)
}

/// A resumable training phase.
#[derive(Debug)]
pub struct Session<'a> {
    pub network: Network,
    pub spec: PhaseSpec,
    split: &'a Split,
    optimizer: Optimizer,
    schedule: LrSchedule,
    trainable: Vec<ParamId>,
    step: usize,
    /// Offset added to logged step numbers (steps completed by earlier phases).
    pub step_offset: usize,
}

impl<'a> Session<'a> {
    pub fn new(network: Network, spec: PhaseSpec, split: &'a Split) -> Result<Self> {
        if spec.plan.batch_size > split.len() {
            return Err(Error::Config(format!("batch size {} exceeds split of {}", spec.plan.batch_size, split.len())));
        }
        let trainable = spec.trainable(&network);
        let sizes: Vec<usize> = trainable.iter().map(|&id| network.params().get(id).numel()).collect();
        let optimizer = match spec.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(spec.adam, &sizes)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(spec.sgd, &sizes)),
        };
        let schedule = spec.schedule(split.len());
        Ok(Self { network, spec, split, optimizer, schedule, trainable, step: 0, step_offset: 0 })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        self.step / self.spec.steps_per_epoch(self.split.len()).max(1)
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let per_epoch = self.spec.steps_per_epoch(self.split.len());
        let (epoch, index) = (self.step / per_epoch, self.step % per_epoch);
        let lr = self.schedule.lr_at(self.step)?;
        let batch = self.spec.plan.batch(self.split, epoch, index)?;
        let mut tape = Tape::new();
        let (loss, report, vars) = batch_loss(&self.network, &batch, &self.spec, &mut tape)?;
        if !report.combined.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {} ({report:?})", self.step)));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let params = self.network.params_mut();
        params.zero_grad();
        params.accumulate(&vars, &grads);
        self.optimizer.step(params.select_mut(&self.trainable), lr)?;
        params.round_f32();
        self.optimizer.round_state_f32();
        let record = StepRecord {
            step: self.step_offset + self.step,
            epoch,
            phase: self.spec.phase,
            bce: report.bce,
            con: report.con,
            combined: report.combined,
            lr,
            anchors_skipped: report.anchors_skipped,
        };
        self.step += 1;
        Ok(record)
    }

    /// Parameters plus optimizer state at the current step.
    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.network.params();
        let names: Vec<&str> = self.trainable.iter().map(|&id| params.name(id)).collect();
        let shapes: Vec<&[usize]> = self.trainable.iter().map(|&id| params.get(id).shape()).collect();
        Checkpoint {
            tensors: params.export(),
            optimizer: Some(OptimizerSection {
                kind: self.optimizer.kind().tag(),
                step: self.step as u64,
                buffers: self.optimizer.export_state(&names, &shapes),
            }),
        }
    }

    /// Restores parameters and optimizer state into a fresh session.
    pub fn resume(network: Network, spec: PhaseSpec, split: &'a Split, ckpt: &Checkpoint) -> Result<Self> {
        let mut session = Self::new(network, spec, split)?;
        session.network.params_mut().import(&ckpt.tensors)?;
        let opt = ckpt.optimizer.as_ref().ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        if opt.kind != session.optimizer.kind().tag() {
            return Err(Error::Format(format!("checkpoint optimizer kind {} does not match phase", opt.kind)));
        }
        let params = session.network.params();
        let names: Vec<String> = session.trainable.iter().map(|&id| params.name(id).to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        session.optimizer.import_state(opt.step, &names, &opt.buffers)?;
        session.step = opt.step as usize;
        if session.step > session.total_steps() {
            return Err(Error::Format(format!("checkpoint step {} beyond phase length", session.step)));
        }
        Ok(session)
    }
}

/// Writes model parameters and optional optimizer state.
pub fn save_checkpoint(network: &Network, optimizer: Option<OptimizerSection>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint { tensors: network.params().export(), optimizer }.save(path)
}

/// Loads a checkpoint into `network`; shapes must match exactly.
pub fn load_checkpoint(network: &mut Network, path: impl AsRef<Path>) -> Result<Option<OptimizerSection>> {
    let ckpt = Checkpoint::load(path)?;
    network.params_mut().import(&ckpt.tensors)?;
    Ok(ckpt.optimizer)
}

pub fn init_network(cfg: &TrainConfig) -> Result<Network> {
    let seed = derive_seed(&[cfg.seed, 1]);
    Ok(if cfg.variant.uses_backbone() {
        Network::Backbone(BackboneModel::init(&cfg.model, seed)?)
    } else {
        Network::MulCon(MulConModel::init(&cfg.model, seed)?)
    })
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    metrics: Option<PathBuf>,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let metrics = dir.join("metrics.ndjson");
        File::create(&metrics)?;
        Ok(Self { dir, metrics: Some(metrics) })
    }

    fn append(&self, records: &[StepRecord]) -> Result<()> {
        if let Some(path) = &self.metrics {
            let mut w = BufWriter::new(fs::OpenOptions::new().append(true).open(path)?);
            for r in records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs one phase to completion, logging steps and periodic evaluations.
pub fn run_phase(
    network: Network,
    spec: PhaseSpec,
    train: &Split,
    test: Option<&Split>,
    eval_every: usize,
    log: &mut RunLog,
    out: Option<&RunOutput>,
) -> Result<Network> {
    let mut session = Session::new(network, spec, train)?;
    session.step_offset = log.steps.last().map_or(0, |r| r.step + 1);
    let per_epoch = session.spec.steps_per_epoch(train.len());
    let mut pending = Vec::new();
    while !session.is_finished() {
        let record = session.step()?;
        pending.push(record);
        let epoch_done = session.steps_done() % per_epoch == 0;
        if epoch_done {
            if let Some(out) = out {
                out.append(&pending)?;
            }
            log.steps.append(&mut pending);
            let epoch = session.steps_done() / per_epoch;
            if let (Some(test), true) = (test, eval_every > 0 && epoch % eval_every == 0) {
                let (m, _) = evaluate(&session.network, test, 100)?;
                log.evals.push(EpochEval { phase: session.spec.phase, epoch, map: m.map, cf1: m.cf1, of1: m.of1 });
            }
        }
    }
    if let Some(out) = out {
        out.append(&pending)?;
    }
    log.steps.append(&mut pending);
    if let Some(out) = out {
        let name = match session.spec.phase {
            Phase::Pretrain => "pretrain.ckpt",
            Phase::Finetune => "finetune.ckpt",
        };
        let path = out.dir.join(name);
        session.checkpoint().save(&path)?;
        log.checkpoints.push(path);
    }
    Ok(session.network)
}

/// Step 1: BCE-only training of a fresh or loaded network.
pub fn pretrain(network: Network, train: &Split, cfg: &TrainConfig, log: &mut RunLog, out: Option<&RunOutput>) -> Result<Network> {
    run_phase(network, PhaseSpec::pretrain(cfg), train, None, 0, log, out)
}

/// Step 2: BCE + γ·contrastive finetuning.
pub fn contrastive_finetune(network: Network, train: &Split, cfg: &TrainConfig, log: &mut RunLog, out: Option<&RunOutput>) -> Result<Network> {
    run_phase(network, PhaseSpec::finetune(cfg), train, None, 0, log, out)
}

/// Trained network together with its log.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub network: Network,
    pub log: RunLog,
}

/// Runs the phases a variant prescribes and evaluates on `test` at the end.
///
/// With an output directory, the resolved config is written first, then the
/// metrics log, phase checkpoints, `model.ckpt` and `run_log.json`.
pub fn run_variant(cfg: &TrainConfig, train: &Split, test: Option<&Split>, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
            Some(RunOutput::new(dir)?)
        }
        None => None,
    };
    let mut log = RunLog::new(cfg);
    let mut network = init_network(cfg)?;
    if cfg.variant.runs_pretrain() {
        network = run_phase(network, PhaseSpec::pretrain(cfg), train, test, cfg.eval_every, &mut log, out.as_ref())?;
    }
    if cfg.variant.runs_finetune() {
        network = run_phase(network, PhaseSpec::finetune(cfg), train, test, cfg.eval_every, &mut log, out.as_ref())?;
    }
    if let Some(test) = test {
        log.final_metrics = Some(evaluate(&network, test, 100)?.0);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(out) = &out {
        let path = out.dir.join("model.ckpt");
        save_checkpoint(&network, None, &path)?;
        log.checkpoints.push(path);
        fs::write(out.dir.join("run_log.json"), serde_json::to_string_pretty(&log)?)?;
    }
    Ok(RunOutcome { network, log })
}

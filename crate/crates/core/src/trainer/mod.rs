//! Mini-batch AdamW training with an EMA shadow and resumable checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{ema_update, AdamW, OptimizerState};

use crate::dmsva::objective::{record_objective, register_banks, ObjectiveOptions};
use crate::dmsva::{batch_objective, enforce_norm_floor, DmsvaModel, LossBreakdown, LossWeights, ModelError};
use crate::numkernel::{KernelError, Rng, Tape, Tensor2};
use crate::synthgen::SamplePair;

/// Stream ids for the randomness a training run consumes.
const INIT_STREAM: u64 = 0x1;
const BATCH_STREAM: u64 = 0x2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub loss_weights: LossWeights,
    pub ema_decay: f64,
    pub detach_teacher: bool,
    pub temperature: f64,
    pub slot_count: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 2000,
            loss_weights: LossWeights::default(),
            ema_decay: 0.999,
            detach_teacher: true,
            temperature: crate::dmsva::DEFAULT_TEMPERATURE,
            slot_count: 32,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale setting: lr 1e-5, 800k steps, N = 128. Not runnable at desk scale.
    pub fn full_scale() -> Self {
        Self { lr: 1e-5, steps: 800_000, batch_size: 64, slot_count: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::InvalidConfig { field, reason });
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && (0.0..1.0).contains(&self.weight_decay)) {
            return bad("weight_decay", format!("must lie in [0, 1), got {}", self.weight_decay));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        if self.slot_count == 0 {
            return bad("slot_count", "must be at least 1".into());
        }
        if let Err(reason) = self.loss_weights.validate() {
            return bad("loss_weights", reason);
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions { weights: self.loss_weights, temperature: self.temperature, detach_teacher: self.detach_teacher }
    }
}

/// Initial model for a run, a function of `(seed, slot_count, dim, temperature)`.
pub fn init_model(cfg: &TrainConfig, dim: usize) -> Result<DmsvaModel, TrainError> {
    let mut rng = Rng::substream(cfg.seed, INIT_STREAM);
    Ok(DmsvaModel::random(cfg.slot_count, dim, cfg.temperature, &mut rng)?)
}

/// Dataset indices drawn (with replacement) for a given step.
pub fn batch_indices(n_samples: usize, cfg: &TrainConfig, step: u64) -> Vec<usize> {
    let base = Rng::substream(cfg.seed, BATCH_STREAM).next_u64();
    let mut rng = Rng::substream(base, step);
    (0..cfg.batch_size).map(|_| rng.below(n_samples)).collect()
}

/// Owns a model, its optimizer state and EMA shadow during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: DmsvaModel,
    optimizer: OptimizerState,
    ema: [Tensor2; 4],
    config: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: DmsvaModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = model;
        model.set_temperature(config.temperature)?;
        let slots = model.slot_tensors();
        Ok(Self { optimizer: OptimizerState::new(&slots), ema: slots, model, config, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.config.validate()?;
        let model = DmsvaModel::from_slots(ckpt.banks, ckpt.config.temperature)?;
        Ok(Self { model, optimizer: ckpt.optimizer, ema: ckpt.ema, config: ckpt.config, step: ckpt.step })
    }

    /// Swaps in `config` when resuming. Only `steps` and `checkpoint_every` may
    /// differ from the configuration the run was started with.
    pub fn with_config(mut self, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let normalized = TrainConfig { steps: self.config.steps, checkpoint_every: self.config.checkpoint_every, ..config.clone() };
        if normalized != self.config {
            return Err(TrainError::InvalidConfig {
                field: "train",
                reason: "resumed run must keep every field except steps and checkpoint_every".into(),
            });
        }
        self.config = config;
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            banks: self.model.slot_tensors(),
            optimizer: self.optimizer.clone(),
            ema: self.ema.clone(),
            config: self.config.clone(),
            step: self.step,
        }
    }

    pub fn model(&self) -> &DmsvaModel {
        &self.model
    }

    pub fn into_model(self) -> DmsvaModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn ema_shadow(&self) -> &[Tensor2; 4] {
        &self.ema
    }

    /// The EMA shadow as a model.
    pub fn ema_model(&self) -> Result<DmsvaModel, TrainError> {
        let mut slots = self.ema.clone();
        slots.iter_mut().for_each(enforce_norm_floor);
        Ok(DmsvaModel::from_slots(slots, self.config.temperature)?)
    }

    /// One AdamW update on `batch`; returns the losses measured before the update.
    pub fn train_step(&mut self, batch: &[SamplePair]) -> Result<LossBreakdown, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let dim = self.model.dim();
        if let Some(bad) = batch.iter().find(|p| p.primary.a.dim() != dim || p.primary.v.dim() != dim) {
            return Err(TrainError::Kernel(KernelError::DimensionMismatch { expected: dim, found: bad.primary.a.dim() }));
        }
        let mut tape = Tape::new();
        let banks = register_banks(&mut tape, &self.model);
        let recorded = record_objective(&mut tape, &banks, batch, &self.config.objective())?;
        let breakdown = recorded.breakdown(&tape);
        if let Some(component) = breakdown.non_finite_component() {
            return Err(TrainError::NonFiniteLoss { component, step: self.step });
        }
        let grads = tape.backward(recorded.total)?;
        let grads = banks.as_array().map(|v| grads.wrt(v));
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { component: "gradient", step: self.step });
        }

        let opt = self.config.optimizer();
        {
            let [pk, ek, tv, sv] = self.model.banks_mut();
            let [pk, ek, tv, sv] = [pk, ek, tv, sv].map(|b| b.slots_mut());
            opt.update(&mut [pk, ek, tv, sv], &grads, &mut self.optimizer);
        }
        self.model.enforce_norm_floor();
        let params = self.model.banks().map(|b| b.slots());
        ema_update(&mut self.ema, &params, self.config.ema_decay);
        self.step += 1;
        Ok(breakdown)
    }

    /// Trains until `self.step() == until`, calling `on_step` after every update.
    pub fn run_until<F>(&mut self, dataset: &[SamplePair], until: u64, mut on_step: F) -> Result<Vec<LossBreakdown>, TrainError>
    where
        F: FnMut(&Trainer, &LossBreakdown) -> Result<(), TrainError>,
    {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut history = Vec::new();
        while self.step < until {
            let batch: Vec<SamplePair> =
                batch_indices(dataset.len(), &self.config, self.step).into_iter().map(|i| dataset[i].clone()).collect();
            let b = self.train_step(&batch)?;
            on_step(self, &b)?;
            history.push(b);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: DmsvaModel,
    pub ema_model: DmsvaModel,
    pub history: Vec<LossBreakdown>,
    pub checkpoint: Checkpoint,
}

/// Trains a fresh model on `dataset` for `cfg.steps` steps.
pub fn fit(dataset: &[SamplePair], cfg: &TrainConfig) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    let dim = dataset.first().ok_or(TrainError::EmptyDataset)?.primary.a.dim();
    let mut trainer = Trainer::new(init_model(cfg, dim)?, cfg.clone())?;
    let history = trainer.run_until(dataset, cfg.steps, |_, _| Ok(()))?;
    Ok(FitOutcome {
        ema_model: trainer.ema_model()?,
        checkpoint: trainer.checkpoint(),
        model: trainer.into_model(),
        history,
    })
}

/// The objective averaged over `samples`, evaluated without a tape.
pub fn evaluate_loss(model: &DmsvaModel, samples: &[SamplePair], weights: &LossWeights) -> Result<LossBreakdown, TrainError> {
    Ok(batch_objective(model, model, samples, weights)?)
}

pub const LOSS_CSV_HEADER: &str = "step,rec,align,imi,timbre_c,env_c,total";

/// CSV text of a loss history whose first entry is `first_step`.
pub fn loss_csv(history: &[LossBreakdown], first_step: u64) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (i, b) in history.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            first_step + i as u64,
            b.rec,
            b.align,
            b.imi,
            b.timbre_c,
            b.env_c,
            b.total
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[LossBreakdown], first_step: u64) -> Result<(), TrainError> {
    std::fs::write(path, loss_csv(history, first_step))?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

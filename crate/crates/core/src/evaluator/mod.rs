//! Retrieval and decoupling metrics, baseline fusion models and the slot sweep.

mod baseline;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use baseline::{run_baseline, train_baseline, BaselineFusion, FusionKind};

use crate::dmsva::{loss_align, DmsvaModel, ModelError};
use crate::numkernel::{dot, norm, Embedding, KernelError, Rng};
use crate::synthgen::{LatentWorld, Observation, PairMode, SamplePair};
use crate::trainer::{fit, TrainConfig, TrainError};

pub const MIN_PROBES: usize = 50;

/// Predicts an auditory embedding from a visual observation.
pub trait VisualRecall {
    fn recall(&self, obs: &Observation) -> Result<Embedding, EvalError>;
}

/// Predicts separate timbre and sound components from a visual observation.
pub trait ComponentRecall {
    fn components(&self, obs: &Observation) -> Result<(Embedding, Embedding), EvalError>;
}

impl VisualRecall for DmsvaModel {
    fn recall(&self, obs: &Observation) -> Result<Embedding, EvalError> {
        Ok(self.recall_from_visual(&obs.v)?.combined)
    }
}

impl ComponentRecall for DmsvaModel {
    fn components(&self, obs: &Observation) -> Result<(Embedding, Embedding), EvalError> {
        let out = self.recall_from_visual(&obs.v)?;
        Ok((out.timbre_component, out.sound_component))
    }
}

/// Returns the observation's own auditory embedding; the upper bound on recall.
#[derive(Clone, Copy, Debug, Default)]
pub struct CopyOracle;

impl VisualRecall for CopyOracle {
    fn recall(&self, obs: &Observation) -> Result<Embedding, EvalError> {
        Ok(obs.a.clone())
    }
}

/// Cosine similarity, defined as 0 when either side has no direction.
pub fn cosine_or_zero(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx <= crate::numkernel::NORM_EPS || ny <= crate::numkernel::NORM_EPS {
        0.0
    } else {
        dot(x, y) / (nx * ny)
    }
}

/// Rank (1-based) of each query's own target among all targets.
///
/// Ties count against the true item: it ranks behind every target scoring
/// greater than or equal to it.
pub fn retrieval_ranks(predictions: &[Embedding], targets: &[Embedding]) -> Vec<usize> {
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let own = cosine_or_zero(p, &targets[i]);
            1 + targets.iter().enumerate().filter(|&(j, t)| j != i && cosine_or_zero(p, t) >= own).count()
        })
        .collect()
}

/// Fraction of queries whose own target ranks within the top `k`.
pub fn cross_modal_recall(predictions: &[Embedding], targets: &[Embedding], k: usize) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(KernelError::DimensionMismatch { expected: targets.len(), found: predictions.len() }.into());
    }
    if k == 0 || targets.len() < k.max(1) {
        return Err(EvalError::TooFewPairs { pairs: targets.len(), k });
    }
    let ranks = retrieval_ranks(predictions, targets);
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn predictions<M: VisualRecall + ?Sized>(model: &M, pairs: &[SamplePair]) -> Result<Vec<Embedding>, EvalError> {
    pairs.iter().map(|p| model.recall(&p.primary)).collect()
}

pub fn recall_at_k<M: VisualRecall + ?Sized>(model: &M, pairs: &[SamplePair], k: usize) -> Result<f64, EvalError> {
    let preds = predictions(model, pairs)?;
    let targets: Vec<Embedding> = pairs.iter().map(|p| p.primary.a.clone()).collect();
    cross_modal_recall(&preds, &targets, k)
}

/// Mean alignment KL between the auditory and visual weights on `pairs`.
pub fn mean_align_kl(model: &DmsvaModel, pairs: &[SamplePair]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for p in pairs {
        let aud = model.reconstruct_auditory(&p.primary.a)?;
        let vis = model.recall_from_visual(&p.primary.v)?;
        total += loss_align(&aud, &vis)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub timbre: f64,
    pub env: f64,
}

/// Probe pairs for the decoupling margins: `n_probe` fixed-character pairs and
/// `n_probe` fixed-environment pairs.
pub fn probe_pairs(world: &LatentWorld, n_probe: usize, seed: u64) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let draw = |mode, stream| {
        let base = Rng::substream(seed, stream).next_u64();
        (0..n_probe).map(|i| world.sample_pair(mode, &mut Rng::substream(base, i as u64))).collect()
    };
    (draw(PairMode::SameCharacterDiffEnv, 1), draw(PairMode::DiffCharacterSameEnv, 2))
}

/// Within-factor minus across-factor cosine of each decoupled component.
///
/// `timbre = E[cos(timbre) | same character, different environment]
///         − E[cos(timbre) | different character, same environment]`,
/// and `env` is the mirror image on the sound component.
pub fn decoupling_margins<M: ComponentRecall + ?Sized>(
    model: &M,
    world: &LatentWorld,
    n_probe: usize,
    seed: u64,
) -> Result<Margins, EvalError> {
    if n_probe < MIN_PROBES {
        return Err(EvalError::TooFewProbes { n_probe });
    }
    let (fixed_character, fixed_environment) = probe_pairs(world, n_probe, seed);
    let mean_cos = |pairs: &[SamplePair]| -> Result<(f64, f64), EvalError> {
        let (mut t, mut s) = (0.0, 0.0);
        for p in pairs {
            let partner = p.partner.as_ref().expect("probe pairs carry a partner");
            let (ta, sa) = model.components(&p.primary)?;
            let (tb, sb) = model.components(partner)?;
            t += cosine_or_zero(&ta, &tb);
            s += cosine_or_zero(&sa, &sb);
        }
        Ok((t / pairs.len() as f64, s / pairs.len() as f64))
    };
    let (t_fc, s_fc) = mean_cos(&fixed_character)?;
    let (t_fe, s_fe) = mean_cos(&fixed_environment)?;
    Ok(Margins { timbre: t_fc - t_fe, env: s_fe - s_fc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Seed of the held-out grid (one fresh pair per character × environment).
    pub eval_seed: u64,
    pub probe_seed: u64,
    pub n_probe: usize,
    /// Evaluate the EMA shadow instead of the raw weights.
    pub use_ema: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { eval_seed: 1001, probe_seed: 2002, n_probe: 200, use_ema: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub slot_count: Option<usize>,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_align_kl: Option<f64>,
    pub timbre_margin: Option<f64>,
    pub env_margin: Option<f64>,
    pub eval_pairs: usize,
    pub steps: u64,
    pub seed: u64,
}

pub const REPORT_CSV_HEADER: &str =
    "model,slot_count,recall_at_1,recall_at_5,mean_align_kl,timbre_margin,env_margin,eval_pairs,steps,seed";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.slot_count.map(|n| n.to_string()).unwrap_or_default(),
            self.recall_at_1,
            self.recall_at_5,
            opt(self.mean_align_kl),
            opt(self.timbre_margin),
            opt(self.env_margin),
            self.eval_pairs,
            self.steps,
            self.seed
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(out, "{}", r.csv_row()).expect("writing to a String");
    }
    out
}

/// The held-out split every model in a comparison is scored on.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub pairs: Vec<SamplePair>,
}

impl EvalSplit {
    pub fn grid(world: &LatentWorld, opts: &EvalOptions) -> Self {
        Self { pairs: world.grid_pairs(opts.eval_seed) }
    }
}

/// Full report for a trained alignment model.
pub fn evaluate_dmsva(
    model: &DmsvaModel,
    world: &LatentWorld,
    split: &EvalSplit,
    opts: &EvalOptions,
    cfg: &TrainConfig,
) -> Result<EvalReport, EvalError> {
    let preds = predictions(model, &split.pairs)?;
    let targets: Vec<Embedding> = split.pairs.iter().map(|p| p.primary.a.clone()).collect();
    let margins = decoupling_margins(model, world, opts.n_probe, opts.probe_seed)?;
    Ok(EvalReport {
        model: "dmsva".into(),
        slot_count: Some(model.slot_count()),
        recall_at_1: cross_modal_recall(&preds, &targets, 1)?,
        recall_at_5: cross_modal_recall(&preds, &targets, 5.min(targets.len()))?,
        mean_align_kl: Some(mean_align_kl(model, &split.pairs)?),
        timbre_margin: Some(margins.timbre),
        env_margin: Some(margins.env),
        eval_pairs: split.pairs.len(),
        steps: cfg.steps,
        seed: cfg.seed,
    })
}

/// Trains one alignment model per slot count with an otherwise identical budget.
pub fn slot_sweep(
    slot_counts: &[usize],
    dataset: &[SamplePair],
    world: &LatentWorld,
    split: &EvalSplit,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>, EvalError> {
    slot_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(EvalError::Train(TrainError::InvalidConfig { field: "slot_count", reason: "must be at least 1".into() }));
            }
            let cfg = TrainConfig { slot_count: n, ..cfg.clone() };
            let out = fit(dataset, &cfg)?;
            let model = if opts.use_ema { &out.ema_model } else { &out.model };
            evaluate_dmsva(model, world, split, opts, &cfg)
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("recall@{k} needs at least {k} evaluation pairs, got {pairs}")]
    TooFewPairs { pairs: usize, k: usize },
    #[error("decoupling margins need at least {MIN_PROBES} probes, got {n_probe}")]
    TooFewProbes { n_probe: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

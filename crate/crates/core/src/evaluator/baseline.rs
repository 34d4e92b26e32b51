//! Undecoupled fusion baselines trained on reconstruction alone.

use serde::{Deserialize, Serialize};

use super::{cross_modal_recall, predictions, EvalError, EvalReport, EvalSplit, VisualRecall};
use crate::numkernel::{Embedding, KernelError, Rng, Tape, Tensor2, Var, Vector};
use crate::synthgen::{Observation, SamplePair};
use crate::trainer::{batch_indices, AdamW, OptimizerState, TrainConfig, TrainError};

const BASELINE_INIT_STREAM: u64 = 0x11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// `â_v = P · v` with a trainable `D × D` projection.
    ConcatFusion,
    /// Single-head dot-product attention of `v` over `N` trainable tokens,
    /// with trainable key and value projections.
    AttnFusion,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::ConcatFusion => "concat_fusion",
            FusionKind::AttnFusion => "attn_fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineFusion {
    pub kind: FusionKind,
    /// Concat: `[P]`. Attn: `[tokens (N×D), W_k (D×D), W_v (D×D)]`.
    pub params: Vec<Tensor2>,
}

impl BaselineFusion {
    pub fn random(kind: FusionKind, dim: usize, tokens: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut gauss = |r: usize, c: usize| {
            Tensor2::from_vec(r, c, (0..r * c).map(|_| std * rng.normal()).collect()).expect("sized")
        };
        let params = match kind {
            FusionKind::ConcatFusion => vec![gauss(dim, dim)],
            FusionKind::AttnFusion => vec![gauss(tokens, dim), gauss(dim, dim), gauss(dim, dim)],
        };
        Self { kind, params }
    }

    pub fn zeros(kind: FusionKind, dim: usize, tokens: usize) -> Self {
        let params = match kind {
            FusionKind::ConcatFusion => vec![Tensor2::zeros(dim, dim)],
            FusionKind::AttnFusion => vec![Tensor2::zeros(tokens, dim), Tensor2::zeros(dim, dim), Tensor2::zeros(dim, dim)],
        };
        Self { kind, params }
    }

    pub fn dim(&self) -> usize {
        self.params[0].cols()
    }

    /// Records `â_v` for the column `v` given the parameters' tape handles.
    pub fn record(&self, tape: &mut Tape, params: &[Var], v: Var) -> Result<Var, KernelError> {
        match self.kind {
            FusionKind::ConcatFusion => tape.matvec(params[0], v),
            FusionKind::AttnFusion => {
                let keys = tape.matmul(params[0], params[1])?;
                let values = tape.matmul(params[0], params[2])?;
                let scores = tape.matvec(keys, v)?;
                let scaled = tape.scale(scores, 1.0 / (self.dim() as f64).sqrt());
                let weights = tape.softmax(scaled);
                tape.matvec_transposed(values, weights)
            }
        }
    }

    pub fn predict(&self, v: &[f64]) -> Result<Embedding, KernelError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let v = tape.constant(Tensor2::column(v));
        let out = self.record(&mut tape, &params, v)?;
        Ok(Vector::from(tape.value(out).data()))
    }
}

impl VisualRecall for BaselineFusion {
    fn recall(&self, obs: &Observation) -> Result<Embedding, EvalError> {
        Ok(self.predict(&obs.v)?)
    }
}

/// Trains a baseline on `mean ||a − â_v||²` with the same batches, optimizer
/// and step budget as the alignment model under `cfg`.
pub fn train_baseline(kind: FusionKind, dataset: &[SamplePair], cfg: &TrainConfig) -> Result<BaselineFusion, TrainError> {
    cfg.validate()?;
    let dim = dataset.first().ok_or(TrainError::EmptyDataset)?.primary.a.dim();
    let mut rng = Rng::substream(cfg.seed, BASELINE_INIT_STREAM);
    let mut model = BaselineFusion::random(kind, dim, cfg.slot_count, &mut rng);
    let opt: AdamW = cfg.optimizer();
    let mut state = OptimizerState::new(&model.params);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for i in batch_indices(dataset.len(), cfg, step) {
            let obs = &dataset[i].primary;
            let v = tape.constant(Tensor2::column(&obs.v));
            let a = tape.constant(Tensor2::column(&obs.a));
            let pred = model.record(&mut tape, &params, v)?;
            terms.push(tape.sq_dist(a, pred)?);
        }
        let sum = tape.sum(&terms)?;
        let loss = tape.scale(sum, 1.0 / terms.len() as f64);
        if !tape.scalar(loss).is_finite() {
            return Err(TrainError::NonFiniteLoss { component: "rec", step });
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor2> = params.iter().map(|&p| grads.wrt(p)).collect();
        let mut refs: Vec<&mut Tensor2> = model.params.iter_mut().collect();
        opt.update(&mut refs, &grads, &mut state);
    }
    Ok(model)
}

/// Trains and scores a baseline on `split`.
pub fn run_baseline(
    kind: FusionKind,
    dataset: &[SamplePair],
    split: &EvalSplit,
    cfg: &TrainConfig,
) -> Result<EvalReport, EvalError> {
    let model = train_baseline(kind, dataset, cfg)?;
    let preds = predictions(&model, &split.pairs)?;
    let targets: Vec<Embedding> = split.pairs.iter().map(|p| p.primary.a.clone()).collect();
    Ok(EvalReport {
        model: kind.name().into(),
        slot_count: (kind == FusionKind::AttnFusion).then_some(cfg.slot_count),
        recall_at_1: cross_modal_recall(&preds, &targets, 1)?,
        recall_at_5: cross_modal_recall(&preds, &targets, 5.min(targets.len()))?,
        mean_align_kl: None,
        timbre_margin: None,
        env_margin: None,
        eval_pairs: split.pairs.len(),
        steps: cfg.steps,
        seed: cfg.seed,
    })
}

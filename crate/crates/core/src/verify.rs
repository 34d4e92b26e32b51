//! Finite-difference verification of every loss component's bank gradients.
//!
//! Each trial draws a small random model and a batch containing all three pair
//! modes, differentiates one loss component on the tape, and compares against
//! central differences of the tape-free objective. With a detached teacher the
//! reference pathway is evaluated on a frozen copy of the banks, so the
//! numeric side differentiates the same stop-gradient surrogate.

use serde::Serialize;

use crate::dmsva::objective::{record_objective, register_banks, ObjectiveOptions};
use crate::dmsva::{batch_objective, BankRole, DmsvaModel, LossBreakdown, LossWeights, ModelError};
use crate::numkernel::gradcheck::{compare, Tolerance};
use crate::numkernel::{KernelError, Rng, Tape, Tensor2};
use crate::synthgen::{build_world, GenError, PairMode, SamplePair, WorldSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Rec,
    Align,
    Imi,
    TimbreC,
    EnvC,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 6] = [
        LossComponent::Rec,
        LossComponent::Align,
        LossComponent::Imi,
        LossComponent::TimbreC,
        LossComponent::EnvC,
        LossComponent::Total,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossComponent::Rec => "L_rec",
            LossComponent::Align => "L_align",
            LossComponent::Imi => "L_imi",
            LossComponent::TimbreC => "L_timbre_c",
            LossComponent::EnvC => "L_env_c",
            LossComponent::Total => "L_total",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| {
            let l = c.label();
            s.eq_ignore_ascii_case(l) || s.eq_ignore_ascii_case(&l[2..])
        })
    }

    fn pick(self, b: &LossBreakdown) -> f64 {
        match self {
            LossComponent::Rec => b.rec,
            LossComponent::Align => b.align,
            LossComponent::Imi => b.imi,
            LossComponent::TimbreC => b.timbre_c,
            LossComponent::EnvC => b.env_c,
            LossComponent::Total => b.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub temperature: f64,
    pub detach_teacher: bool,
    pub weights: LossWeights,
    pub max_slots: usize,
    pub max_dim: usize,
    pub tolerance: Tolerance,
    /// Negates the analytic gradient of one component; used to prove the check bites.
    pub fault: Option<LossComponent>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            temperature: 1.0,
            detach_teacher: true,
            weights: LossWeights::default(),
            max_slots: 8,
            max_dim: 16,
            tolerance: Tolerance::default(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckFailure {
    pub component: LossComponent,
    pub trial: usize,
    pub bank: BankRole,
    /// Norm-wise relative error over the bank.
    pub relative_error: f64,
    /// Flat row-major index of the worst entry inside the bank.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub component: LossComponent,
    pub trials: usize,
    pub checked_entries: usize,
    /// Largest bank-wise relative error over all trials, among banks above the magnitude floor.
    pub max_relative_error: f64,
    pub failures: Vec<GradcheckFailure>,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }
}

/// A small random instance: model plus one batch covering every pair mode.
/// Two characters and two environments keep prototype generation feasible at D = 2.
pub fn random_instance(trial_seed: u64, opts: &GradcheckOptions) -> Result<(DmsvaModel, Vec<SamplePair>), VerifyError> {
    let mut rng = Rng::new(trial_seed);
    let n = 1 + rng.below(opts.max_slots);
    let d = 2 + rng.below(opts.max_dim.saturating_sub(1).max(1));
    let spec = WorldSpec {
        n_characters: 2,
        n_environments: 2,
        dim: d,
        visual_noise_sigma: 0.05,
        audio_noise_sigma: 0.05,
        linear_visual: rng.below(2) == 0,
        seed: rng.next_u64(),
        ..WorldSpec::default()
    };
    let world = build_world(&spec)?;
    let batch = [PairMode::Standard, PairMode::SameCharacterDiffEnv, PairMode::DiffCharacterSameEnv, PairMode::Standard]
        .into_iter()
        .map(|m| world.sample_pair(m, &mut rng))
        .collect();
    let model = DmsvaModel::random(n, d, opts.temperature, &mut rng)?;
    Ok((model, batch))
}

/// Analytic bank gradients of every component, in [`LossComponent::ALL`] order.
pub fn analytic_gradients(
    model: &DmsvaModel,
    batch: &[SamplePair],
    opts: &ObjectiveOptions,
) -> Result<Vec<[Tensor2; 4]>, VerifyError> {
    let mut tape = Tape::new();
    let banks = register_banks(&mut tape, model);
    let rec = record_objective(&mut tape, &banks, batch, opts)?;
    LossComponent::ALL
        .into_iter()
        .map(|c| {
            let root = match c {
                LossComponent::Rec => rec.rec,
                LossComponent::Align => rec.align,
                LossComponent::Imi => rec.imi,
                LossComponent::TimbreC => rec.timbre_c,
                LossComponent::EnvC => rec.env_c,
                LossComponent::Total => rec.total,
            };
            let g = tape.backward(root)?;
            Ok(banks.as_array().map(|v| g.wrt(v)))
        })
        .collect()
}

/// Central differences of the tape-free objective, in [`LossComponent::ALL`] order.
pub fn numeric_gradients(
    model: &DmsvaModel,
    batch: &[SamplePair],
    weights: &LossWeights,
    detach_teacher: bool,
    step: f64,
) -> Result<Vec<[Tensor2; 4]>, VerifyError> {
    let base = model.slot_tensors();
    let (n, d) = base[0].shape();
    let mut out: Vec<[Tensor2; 4]> = (0..6).map(|_| std::array::from_fn(|_| Tensor2::zeros(n, d))).collect();
    let eval = |slots: &[Tensor2; 4]| -> Result<LossBreakdown, VerifyError> {
        let m = DmsvaModel::from_slots(slots.clone(), model.temperature())?;
        let teacher = if detach_teacher { model } else { &m };
        Ok(batch_objective(&m, teacher, batch, weights)?)
    };
    let mut work = base.clone();
    for bank in 0..4 {
        for i in 0..n * d {
            let orig = base[bank].data()[i];
            work[bank].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[bank].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[bank].data_mut()[i] = orig;
            for (k, c) in LossComponent::ALL.into_iter().enumerate() {
                out[k][bank].data_mut()[i] = (c.pick(&up) - c.pick(&down)) / (2.0 * step);
            }
        }
    }
    Ok(out)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, VerifyError> {
    let mut results: Vec<ComponentResult> = LossComponent::ALL
        .into_iter()
        .map(|component| ComponentResult { component, trials: opts.trials, checked_entries: 0, max_relative_error: 0.0, failures: vec![] })
        .collect();
    let objective = ObjectiveOptions { weights: opts.weights, temperature: opts.temperature, detach_teacher: opts.detach_teacher };
    for trial in 0..opts.trials {
        let trial_seed = Rng::substream(opts.seed, trial as u64).next_u64();
        let (model, batch) = random_instance(trial_seed, opts)?;
        let analytic = analytic_gradients(&model, &batch, &objective)?;
        let numeric = numeric_gradients(&model, &batch, &opts.weights, opts.detach_teacher, opts.tolerance.step)?;
        for (k, result) in results.iter_mut().enumerate() {
            let mut a = analytic[k].clone();
            if opts.fault == Some(result.component) {
                for t in a.iter_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
            }
            result.checked_entries += a.iter().map(|t| t.data().len()).sum::<usize>();
            let loose = Tolerance { relative: 0.0, absolute: 0.0, ..opts.tolerance };
            for m in compare(&a, &numeric[k], &loose).into_iter().filter(|m| m.scale > opts.tolerance.magnitude_floor) {
                result.max_relative_error = result.max_relative_error.max(m.relative_error);
            }
            for m in compare(&a, &numeric[k], &opts.tolerance) {
                result.failures.push(GradcheckFailure {
                    component: result.component,
                    trial,
                    bank: BankRole::ALL[m.param],
                    relative_error: m.relative_error,
                    index: m.index,
                    analytic: m.analytic,
                    numeric: m.numeric,
                });
            }
        }
    }
    Ok(GradcheckReport { components: results })
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

//! Loss terms on concrete pathway outputs, and their weighted combination.
//!
//! All squared distances are summed over components. Batch objectives average
//! each term over the pairs it applies to.

use serde::{Deserialize, Serialize};

use super::model::{DmsvaModel, ModelError, PathwayOutput};
use crate::numkernel::{kl_div, mse, KernelError};
use crate::synthgen::{PairMode, SamplePair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 2.0, lambda3: 0.5, lambda4: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub align: f64,
    pub imi: f64,
    pub timbre_c: f64,
    pub env_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(rec: f64, align: f64, imi: f64, timbre_c: f64, env_c: f64, w: &LossWeights) -> Self {
        let total = rec + w.lambda1 * align + w.lambda2 * imi + w.lambda3 * timbre_c + w.lambda4 * env_c;
        Self { rec, align, imi, timbre_c, env_c, total }
    }

    /// `|total − Σ λ·component|`.
    pub fn identity_residual(&self, w: &LossWeights) -> f64 {
        let expected = self.rec + w.lambda1 * self.align + w.lambda2 * self.imi + w.lambda3 * self.timbre_c + w.lambda4 * self.env_c;
        (self.total - expected).abs()
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("align", self.align),
            ("imi", self.imi),
            ("timbre_c", self.timbre_c),
            ("env_c", self.env_c),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn loss_rec(a: &[f64], auditory: &PathwayOutput) -> Result<f64, KernelError> {
    mse(a, &auditory.combined)
}

/// `KL(w'_t || w_p) + KL(w'_s || w_e)`, auditory weights as the reference.
pub fn loss_align(auditory: &PathwayOutput, visual: &PathwayOutput) -> Result<f64, KernelError> {
    Ok(kl_div(auditory.timbre_weights.as_slice(), visual.timbre_weights.as_slice())?
        + kl_div(auditory.sound_weights.as_slice(), visual.sound_weights.as_slice())?)
}

pub fn loss_imi(auditory: &PathwayOutput, visual: &PathwayOutput) -> Result<f64, KernelError> {
    Ok(mse(&auditory.timbre_component, &visual.timbre_component)?
        + mse(&auditory.sound_component, &visual.sound_component)?)
}

pub fn loss_timbre_consistency(visual_a: &PathwayOutput, visual_b: &PathwayOutput) -> Result<f64, KernelError> {
    mse(&visual_a.timbre_component, &visual_b.timbre_component)
}

pub fn loss_env_consistency(visual_a: &PathwayOutput, visual_b: &PathwayOutput) -> Result<f64, KernelError> {
    mse(&visual_a.sound_component, &visual_b.sound_component)
}

pub fn total_loss(rec: f64, align: f64, imi: f64, timbre_c: f64, env_c: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown::from_components(rec, align, imi, timbre_c, env_c, weights)
}

/// Batch objective evaluated without a tape.
///
/// `teacher` supplies the auditory-pathway reference used by the alignment and
/// imitation terms; pass the model itself for the ordinary objective, or a
/// frozen copy to reproduce the stop-gradient surrogate.
pub fn batch_objective(
    model: &DmsvaModel,
    teacher: &DmsvaModel,
    batch: &[SamplePair],
    weights: &LossWeights,
) -> Result<LossBreakdown, ModelError> {
    let (mut rec, mut align, mut imi, mut tc, mut ec) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut n_tc, mut n_ec) = (0usize, 0usize);
    for pair in batch {
        let obs = &pair.primary;
        let auditory = model.reconstruct_auditory(&obs.a)?;
        let reference = teacher.reconstruct_auditory(&obs.a)?;
        let visual = model.recall_from_visual(&obs.v)?;
        rec += loss_rec(&obs.a, &auditory)?;
        align += loss_align(&reference, &visual)?;
        imi += loss_imi(&reference, &visual)?;
        if let Some(partner) = &pair.partner {
            let other = model.recall_from_visual(&partner.v)?;
            match pair.mode {
                PairMode::SameCharacterDiffEnv => {
                    tc += loss_timbre_consistency(&visual, &other)?;
                    n_tc += 1;
                }
                PairMode::DiffCharacterSameEnv => {
                    ec += loss_env_consistency(&visual, &other)?;
                    n_ec += 1;
                }
                PairMode::Standard => {}
            }
        }
    }
    let n = batch.len().max(1) as f64;
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(LossBreakdown::from_components(rec / n, align / n, imi / n, mean(tc, n_tc), mean(ec, n_ec), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmsva::model::AttentionWeights;
    use crate::numkernel::Vector;

    fn pathway(t: &[f64], s: &[f64], wt: &[f64], ws: &[f64]) -> PathwayOutput {
        let timbre_component = Vector::from(t);
        let sound_component = Vector::from(s);
        PathwayOutput {
            combined: timbre_component.add(&sound_component).unwrap(),
            timbre_component,
            sound_component,
            timbre_weights: AttentionWeights::new(Vector::from(wt)),
            sound_weights: AttentionWeights::new(Vector::from(ws)),
        }
    }

    #[test]
    fn rec_examples() {
        let p = pathway(&[0.0; 4], &[0.0; 4], &[1.0], &[1.0]);
        assert_eq!(loss_rec(&[1.0, 0.0, 0.0, 0.0], &p).unwrap(), 1.0);
        let q = pathway(&[1.0, 2.0], &[0.5, -1.0], &[1.0], &[1.0]);
        assert_eq!(loss_rec(&[1.5, 1.0], &q).unwrap(), 0.0);
        assert!(loss_rec(&[1.0], &q).is_err());
    }

    #[test]
    fn align_examples() {
        let aud = pathway(&[0.0], &[0.0], &[1.0, 0.0], &[0.3, 0.7]);
        let vis = pathway(&[0.0], &[0.0], &[0.5, 0.5], &[0.3, 0.7]);
        assert!((loss_align(&aud, &vis).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_align(&aud, &aud).unwrap(), 0.0);
        let p = pathway(&[0.0], &[0.0], &[0.2, 0.8], &[0.6, 0.4]);
        let q = pathway(&[0.0], &[0.0], &[0.5, 0.5], &[0.1, 0.9]);
        assert!((loss_align(&p, &q).unwrap() - loss_align(&q, &p).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn imi_and_consistency_examples() {
        let a = pathway(&[1.0, 0.0], &[0.2, 0.2], &[1.0], &[1.0]);
        let b = pathway(&[0.0, 0.0], &[0.2, 0.2], &[1.0], &[1.0]);
        assert_eq!(loss_imi(&a, &b).unwrap(), 1.0);
        assert_eq!(loss_imi(&a, &a).unwrap(), 0.0);
        let x = pathway(&[1.0, 0.0], &[1.0, 0.0], &[1.0], &[1.0]);
        let y = pathway(&[0.0, 1.0], &[0.0, 1.0], &[1.0], &[1.0]);
        assert_eq!(loss_timbre_consistency(&x, &y).unwrap(), 2.0);
        assert_eq!(loss_env_consistency(&x, &y).unwrap(), 2.0);
        assert_eq!(loss_timbre_consistency(&x, &x).unwrap(), 0.0);
        assert_eq!(loss_env_consistency(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &w).total, 14.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 };
        assert_eq!(total_loss(0.7, 3.0, 2.0, 1.0, 5.0, &zero).total, 0.7);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda3: -1.0, ..LossWeights::default() }.validate().unwrap_err().contains("lambda3"));
    }

    #[test]
    fn non_finite_component_is_named() {
        let b = LossBreakdown { align: f64::NAN, ..LossBreakdown::default() };
        assert_eq!(b.non_finite_component(), Some("align"));
        assert_eq!(LossBreakdown::default().non_finite_component(), None);
    }
}

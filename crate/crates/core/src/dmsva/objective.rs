//! The training objective recorded on a [`Tape`].

use super::loss::{LossBreakdown, LossWeights};
use super::model::DmsvaModel;
use crate::numkernel::{KernelError, Tape, Tensor2, Var};
use crate::synthgen::{PairMode, SamplePair};

/// Tape handles of the four banks, `pk, ek, tv, sv` order.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub pk: Var,
    pub ek: Var,
    pub tv: Var,
    pub sv: Var,
}

impl BankVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.pk, self.ek, self.tv, self.sv]
    }
}

/// Places the model's banks on the tape as trainable leaves.
pub fn register_banks(tape: &mut Tape, model: &DmsvaModel) -> BankVars {
    let [pk, ek, tv, sv] = model.slot_tensors().map(|t| tape.leaf(t));
    BankVars { pk, ek, tv, sv }
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub temperature: f64,
    /// Stop gradients through the auditory reference in the alignment and imitation terms.
    pub detach_teacher: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct RecordedPathway {
    pub timbre_weights: Var,
    pub sound_weights: Var,
    pub timbre_component: Var,
    pub sound_component: Var,
    pub combined: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RecordedLoss {
    pub rec: Var,
    pub align: Var,
    pub imi: Var,
    pub timbre_c: Var,
    pub env_c: Var,
    pub total: Var,
}

impl RecordedLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            rec: tape.scalar(self.rec),
            align: tape.scalar(self.align),
            imi: tape.scalar(self.imi),
            timbre_c: tape.scalar(self.timbre_c),
            env_c: tape.scalar(self.env_c),
            total: tape.scalar(self.total),
        }
    }
}

fn record_pathway(
    tape: &mut Tape,
    banks: &BankVars,
    query: Var,
    timbre_keys: Var,
    sound_keys: Var,
    temperature: f64,
) -> Result<RecordedPathway, KernelError> {
    let lt = tape.cosine_logits(timbre_keys, query, temperature)?;
    let timbre_weights = tape.softmax(lt);
    let ls = tape.cosine_logits(sound_keys, query, temperature)?;
    let sound_weights = tape.softmax(ls);
    let timbre_component = tape.matvec_transposed(banks.tv, timbre_weights)?;
    let sound_component = tape.matvec_transposed(banks.sv, sound_weights)?;
    let combined = tape.add(timbre_component, sound_component)?;
    Ok(RecordedPathway { timbre_weights, sound_weights, timbre_component, sound_component, combined })
}

pub fn record_auditory(tape: &mut Tape, banks: &BankVars, a: Var, temperature: f64) -> Result<RecordedPathway, KernelError> {
    record_pathway(tape, banks, a, banks.tv, banks.sv, temperature)
}

pub fn record_visual(tape: &mut Tape, banks: &BankVars, v: Var, temperature: f64) -> Result<RecordedPathway, KernelError> {
    record_pathway(tape, banks, v, banks.pk, banks.ek, temperature)
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var, KernelError> {
    let s = tape.sum(terms)?;
    Ok(if terms.len() > 1 { tape.scale(s, 1.0 / terms.len() as f64) } else { s })
}

/// Records every loss term for `batch` and their weighted total.
///
/// Reconstruction, alignment and imitation average over all pairs; the
/// consistency terms average over pairs of their matching mode and are a
/// constant zero when the batch has none.
pub fn record_objective(
    tape: &mut Tape,
    banks: &BankVars,
    batch: &[SamplePair],
    opts: &ObjectiveOptions,
) -> Result<RecordedLoss, KernelError> {
    let tau = opts.temperature;
    let (mut rec, mut align, mut imi, mut tc, mut ec) = (vec![], vec![], vec![], vec![], vec![]);
    for pair in batch {
        let obs = &pair.primary;
        let a = tape.constant(Tensor2::column(&obs.a));
        let v = tape.constant(Tensor2::column(&obs.v));
        let aud = record_auditory(tape, banks, a, tau)?;
        let vis = record_visual(tape, banks, v, tau)?;
        rec.push(tape.sq_dist(a, aud.combined)?);

        let teacher = if opts.detach_teacher {
            RecordedPathway {
                timbre_weights: tape.detach(aud.timbre_weights),
                sound_weights: tape.detach(aud.sound_weights),
                timbre_component: tape.detach(aud.timbre_component),
                sound_component: tape.detach(aud.sound_component),
                combined: aud.combined,
            }
        } else {
            aud
        };
        let kt = tape.kl(teacher.timbre_weights, vis.timbre_weights)?;
        let ks = tape.kl(teacher.sound_weights, vis.sound_weights)?;
        align.push(tape.add(kt, ks)?);
        let it = tape.sq_dist(teacher.timbre_component, vis.timbre_component)?;
        let is = tape.sq_dist(teacher.sound_component, vis.sound_component)?;
        imi.push(tape.add(it, is)?);

        if let Some(partner) = &pair.partner {
            let v2 = tape.constant(Tensor2::column(&partner.v));
            let other = record_visual(tape, banks, v2, tau)?;
            match pair.mode {
                PairMode::SameCharacterDiffEnv => tc.push(tape.sq_dist(vis.timbre_component, other.timbre_component)?),
                PairMode::DiffCharacterSameEnv => ec.push(tape.sq_dist(vis.sound_component, other.sound_component)?),
                PairMode::Standard => {}
            }
        }
    }
    let rec = mean(tape, &rec)?;
    let align = mean(tape, &align)?;
    let imi = mean(tape, &imi)?;
    let timbre_c = mean(tape, &tc)?;
    let env_c = mean(tape, &ec)?;
    let w = &opts.weights;
    let weighted = [
        rec,
        tape.scale(align, w.lambda1),
        tape.scale(imi, w.lambda2),
        tape.scale(timbre_c, w.lambda3),
        tape.scale(env_c, w.lambda4),
    ];
    let total = tape.sum(&weighted)?;
    Ok(RecordedLoss { rec, align, imi, timbre_c, env_c, total })
}

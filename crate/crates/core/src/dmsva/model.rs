use serde::{Deserialize, Serialize};

use crate::numkernel::{cosine_sim, norm, softmax, Embedding, KernelError, Rng, Tensor2, Vector};

/// Smallest slot norm allowed after an optimizer update.
pub const SLOT_NORM_FLOOR: f64 = 1e-6;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BankRole {
    CharacterKey,
    EnvironmentKey,
    TimbreValue,
    SoundValue,
}

impl BankRole {
    pub const ALL: [BankRole; 4] =
        [BankRole::CharacterKey, BankRole::EnvironmentKey, BankRole::TimbreValue, BankRole::SoundValue];

    pub fn short_name(self) -> &'static str {
        match self {
            BankRole::CharacterKey => "pk",
            BankRole::EnvironmentKey => "ek",
            BankRole::TimbreValue => "tv",
            BankRole::SoundValue => "sv",
        }
    }
}

/// `N × D` matrix of learnable slot vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    role: BankRole,
    slots: Tensor2,
}

impl MemoryBank {
    pub fn new(role: BankRole, slots: Tensor2) -> Result<Self, ModelError> {
        let (n, d) = slots.shape();
        if n == 0 || d == 0 {
            return Err(ModelError::EmptyBank);
        }
        if !slots.is_finite() {
            return Err(ModelError::NonFiniteSlot { role });
        }
        if (0..n).any(|i| norm(slots.row(i)) <= crate::numkernel::NORM_EPS) {
            return Err(ModelError::Kernel(KernelError::ZeroNormVector));
        }
        Ok(Self { role, slots })
    }

    /// Slots drawn i.i.d. from `N(0, 1/√D)` per component.
    pub fn random(role: BankRole, n: usize, d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let data = (0..n * d).map(|_| std * rng.normal()).collect();
        let mut slots = Tensor2::from_vec(n, d, data).expect("sized above");
        enforce_norm_floor(&mut slots);
        Self { role, slots }
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn slots(&self) -> &Tensor2 {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        self.slots.row(i)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub(crate) fn slots_mut(&mut self) -> &mut Tensor2 {
        &mut self.slots
    }
}

/// Rescales any slot whose norm fell below [`SLOT_NORM_FLOOR`].
pub(crate) fn enforce_norm_floor(slots: &mut Tensor2) {
    for i in 0..slots.rows() {
        let row = slots.row_mut(i);
        let n = norm(row);
        if n >= SLOT_NORM_FLOOR {
            continue;
        }
        if n > 0.0 {
            let s = SLOT_NORM_FLOOR / n;
            row.iter_mut().for_each(|x| *x *= s);
        } else {
            row[0] = SLOT_NORM_FLOOR;
        }
    }
}

/// Probability vector over the slots of one bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionWeights(Vector);

impl AttentionWeights {
    pub fn new(weights: Vector) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vector(self) -> Vector {
        self.0
    }
}

/// Both components of a pathway, their sum, and the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayOutput {
    pub timbre_component: Embedding,
    pub sound_component: Embedding,
    pub combined: Embedding,
    pub timbre_weights: AttentionWeights,
    pub sound_weights: AttentionWeights,
}

/// The four-bank alignment model.
#[derive(Clone, Debug, PartialEq)]
pub struct DmsvaModel {
    pub bank_pk: MemoryBank,
    pub bank_ek: MemoryBank,
    pub bank_tv: MemoryBank,
    pub bank_sv: MemoryBank,
    temperature: f64,
}

impl DmsvaModel {
    pub fn random(slot_count: usize, dim: usize, temperature: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        if slot_count == 0 || dim == 0 {
            return Err(ModelError::EmptyBank);
        }
        check_temperature(temperature)?;
        let [pk, ek, tv, sv] = BankRole::ALL.map(|role| MemoryBank::random(role, slot_count, dim, rng));
        Ok(Self { bank_pk: pk, bank_ek: ek, bank_tv: tv, bank_sv: sv, temperature })
    }

    /// Banks in `pk, ek, tv, sv` order.
    pub fn from_slots(slots: [Tensor2; 4], temperature: f64) -> Result<Self, ModelError> {
        check_temperature(temperature)?;
        let shape = slots[0].shape();
        if slots.iter().any(|s| s.shape() != shape) {
            return Err(ModelError::BankShapeMismatch);
        }
        let [pk, ek, tv, sv] = slots;
        Ok(Self {
            bank_pk: MemoryBank::new(BankRole::CharacterKey, pk)?,
            bank_ek: MemoryBank::new(BankRole::EnvironmentKey, ek)?,
            bank_tv: MemoryBank::new(BankRole::TimbreValue, tv)?,
            bank_sv: MemoryBank::new(BankRole::SoundValue, sv)?,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.bank_pk.dim()
    }

    pub fn slot_count(&self) -> usize {
        self.bank_pk.slot_count()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<(), ModelError> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(())
    }

    pub fn banks(&self) -> [&MemoryBank; 4] {
        [&self.bank_pk, &self.bank_ek, &self.bank_tv, &self.bank_sv]
    }

    pub fn slot_tensors(&self) -> [Tensor2; 4] {
        self.banks().map(|b| b.slots().clone())
    }

    pub(crate) fn banks_mut(&mut self) -> [&mut MemoryBank; 4] {
        [&mut self.bank_pk, &mut self.bank_ek, &mut self.bank_tv, &mut self.bank_sv]
    }

    pub(crate) fn enforce_norm_floor(&mut self) {
        for bank in self.banks_mut() {
            enforce_norm_floor(bank.slots_mut());
        }
    }

    /// Auditory pathway: the mixed auditory embedding queries the two value banks.
    pub fn reconstruct_auditory(&self, a: &[f64]) -> Result<PathwayOutput, ModelError> {
        self.pathway(a, &self.bank_tv, &self.bank_sv)
    }

    /// Visual pathway: weights come from the key banks, read-out from the value banks.
    pub fn recall_from_visual(&self, v: &[f64]) -> Result<PathwayOutput, ModelError> {
        self.pathway(v, &self.bank_pk, &self.bank_ek)
    }

    fn pathway(&self, query: &[f64], timbre_keys: &MemoryBank, sound_keys: &MemoryBank) -> Result<PathwayOutput, ModelError> {
        let timbre_weights = attend(query, timbre_keys, self.temperature)?;
        let sound_weights = attend(query, sound_keys, self.temperature)?;
        let timbre_component = self.bank_tv.slots().matvec_transposed(timbre_weights.as_slice())?;
        let sound_component = self.bank_sv.slots().matvec_transposed(sound_weights.as_slice())?;
        let combined = timbre_component.add(&sound_component)?;
        Ok(PathwayOutput { timbre_component, sound_component, combined, timbre_weights, sound_weights })
    }
}

fn check_temperature(t: f64) -> Result<(), ModelError> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidTemperature(t))
    }
}

/// `softmax_i(cos(query, slot_i) / temperature)`.
pub fn attend(query: &[f64], bank: &MemoryBank, temperature: f64) -> Result<AttentionWeights, ModelError> {
    if query.len() != bank.dim() {
        return Err(KernelError::DimensionMismatch { expected: bank.dim(), found: query.len() }.into());
    }
    let logits = (0..bank.slot_count())
        .map(|i| cosine_sim(query, bank.slot(i)).map(|c| c / temperature))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AttentionWeights(softmax(&logits)))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("memory banks need at least one slot and one dimension")]
    EmptyBank,
    #[error("all four banks must share one N × D shape")]
    BankShapeMismatch,
    #[error("bank {role:?} contains a non-finite value")]
    NonFiniteSlot { role: BankRole },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[Vec<f64>], role: BankRole) -> MemoryBank {
        MemoryBank::new(role, Tensor2::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn attend_two_orthonormal_slots() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]], BankRole::TimbreValue);
        let w = attend(&[1.0, 0.0], &b, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((w.as_slice()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.7310585786).abs() < 1e-10);
        assert!((w.as_slice()[1] - 0.2689414214).abs() < 1e-10);
    }

    #[test]
    fn identical_slots_give_uniform_weights() {
        let b = bank(&vec![vec![0.3, -0.2, 1.0]; 5], BankRole::CharacterKey);
        let w = attend(&[0.1, 0.9, -0.4], &b, 0.07).unwrap();
        for &x in w.as_slice() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_is_scale_invariant() {
        let b = bank(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], BankRole::SoundValue);
        let w1 = attend(&[1.0, 0.0, 0.0], &b, 1.0).unwrap();
        let w2 = attend(&[3.5, 0.0, 0.0], &b, 1.0).unwrap();
        for (x, y) in w1.as_slice().iter().zip(w2.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn attend_errors() {
        let b = bank(&[vec![1.0, 0.0]], BankRole::SoundValue);
        assert!(matches!(attend(&[0.0, 0.0], &b, 1.0), Err(ModelError::Kernel(KernelError::ZeroNormVector))));
        assert!(matches!(
            attend(&[1.0], &b, 1.0),
            Err(ModelError::Kernel(KernelError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn single_slot_reads_that_slot() {
        let mut rng = Rng::new(3);
        let m = DmsvaModel::random(1, 4, 0.07, &mut rng).unwrap();
        let out = m.reconstruct_auditory(&[0.2, -1.0, 0.5, 0.3]).unwrap();
        assert_eq!(out.timbre_weights.as_slice(), &[1.0]);
        assert_eq!(&*out.timbre_component, m.bank_tv.slot(0));
    }

    #[test]
    fn identical_key_banks_give_identical_visual_weights() {
        let mut rng = Rng::new(9);
        let mut m = DmsvaModel::random(6, 5, 0.5, &mut rng).unwrap();
        m.bank_ek = MemoryBank::new(BankRole::EnvironmentKey, m.bank_pk.slots().clone()).unwrap();
        let out = m.recall_from_visual(&[0.4, -0.1, 0.3, 1.0, -0.7]).unwrap();
        assert_eq!(out.timbre_weights, out.sound_weights);
    }

    #[test]
    fn one_hot_recall_selects_value_slots() {
        // τ tiny and keys exactly aligned with the query → one-hot weights.
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let tv = Tensor2::from_rows(&[vec![2.0, 3.0], vec![-1.0, 5.0]]).unwrap();
        let sv = Tensor2::from_rows(&[vec![0.5, 0.5], vec![7.0, -2.0]]).unwrap();
        let key_t = Tensor2::from_rows(&keys).unwrap();
        let m = DmsvaModel::from_slots([key_t.clone(), key_t, tv, sv], 1e-3).unwrap();
        let out = m.recall_from_visual(&[0.0, 1.0]).unwrap();
        assert_eq!(&*out.combined, &[-1.0 + 7.0, 5.0 - 2.0]);
    }

    #[test]
    fn norm_floor_rescues_collapsed_slots() {
        let mut t = Tensor2::from_rows(&[vec![0.0, 0.0], vec![1e-9, 0.0], vec![1.0, 1.0]]).unwrap();
        enforce_norm_floor(&mut t);
        assert!((norm(t.row(0)) - SLOT_NORM_FLOOR).abs() < 1e-18);
        assert!((norm(t.row(1)) - SLOT_NORM_FLOOR).abs() < 1e-18);
        assert_eq!(t.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn constructor_validation() {
        let ok = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let other = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            DmsvaModel::from_slots([ok.clone(), ok.clone(), ok.clone(), other], 1.0),
            Err(ModelError::BankShapeMismatch)
        ));
        assert!(DmsvaModel::from_slots([ok.clone(), ok.clone(), ok.clone(), ok.clone()], 0.0).is_err());
        assert!(DmsvaModel::random(0, 4, 1.0, &mut Rng::new(0)).is_err());
    }
}

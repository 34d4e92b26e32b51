//! Synthetic factorized embeddings standing in for pretrained audio/visual encoders.
//!
//! Each character `c` owns a timbre prototype `t_c` (auditory) and a face
//! prototype `p_c` (visual); each environment `e` owns a sound prototype `s_e`
//! and a scene prototype `q_e`. A sample for `(c, e)` is
//!
//! ```text
//! a = t_c + 10^(−snr/20) · s_e + σ_a · ξ
//! v = f(W_v [p_c; q_e])       + σ_v · ζ
//! ```
//!
//! with `snr` uniform over the configured dB range, `W_v` a fixed random
//! `D × 2D` map and `f` the identity (linear world) or a saturating tanh.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numkernel::{cosine_sim, Embedding, Rng, Tensor2, Vector};

/// Pairwise |cos| above which prototypes count as collinear.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.95;
/// Desk-scale dataset size.
pub const DEFAULT_N_SAMPLES: usize = 2048;
/// Standard, same-character and different-character proportions.
pub const DEFAULT_MODE_MIX: [f64; 3] = [0.5, 0.25, 0.25];
const MAX_WORLD_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_characters: usize,
    pub n_environments: usize,
    pub dim: usize,
    pub visual_noise_sigma: f64,
    pub audio_noise_sigma: f64,
    /// `[lo, hi]` in dB; the environment term is scaled by `10^(−snr/20)`.
    pub mix_snr_db_range: [f64; 2],
    pub linear_visual: bool,
    /// Pre-activation gain of the tanh when `linear_visual` is false. Larger values
    /// push `v` towards a sign pattern that a linear readout cannot decode.
    pub visual_saturation: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_characters: 8,
            n_environments: 8,
            dim: 32,
            visual_noise_sigma: 0.01,
            audio_noise_sigma: 0.01,
            mix_snr_db_range: [4.0, 20.0],
            linear_visual: true,
            visual_saturation: 10.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        let invalid = |field: &'static str, reason: String| Err(GenError::InvalidSpec { field, reason });
        if self.n_characters < 2 {
            return invalid("n_characters", format!("must be at least 2, got {}", self.n_characters));
        }
        if self.n_environments < 2 {
            return invalid("n_environments", format!("must be at least 2, got {}", self.n_environments));
        }
        if self.dim == 0 {
            return invalid("dim", "must be positive".into());
        }
        for (field, s) in [("visual_noise_sigma", self.visual_noise_sigma), ("audio_noise_sigma", self.audio_noise_sigma)] {
            if !(s.is_finite() && s >= 0.0) {
                return invalid(field, format!("must be finite and non-negative, got {s}"));
            }
        }
        let [lo, hi] = self.mix_snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return invalid("mix_snr_db_range", format!("need finite lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.visual_saturation.is_finite() && self.visual_saturation > 0.0) {
            return invalid("visual_saturation", format!("must be positive, got {}", self.visual_saturation));
        }
        Ok(())
    }
}

/// Ground-truth prototypes and the fixed visual mixing map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWorld {
    pub spec: WorldSpec,
    pub timbre: Vec<Embedding>,
    pub sound: Vec<Embedding>,
    pub visual_character: Vec<Embedding>,
    pub visual_environment: Vec<Embedding>,
    /// `D × 2D`, applied to `[p_c; q_e]`.
    pub visual_map: Tensor2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Standard,
    SameCharacterDiffEnv,
    DiffCharacterSameEnv,
}

impl PairMode {
    pub const ALL: [PairMode; 3] = [PairMode::Standard, PairMode::SameCharacterDiffEnv, PairMode::DiffCharacterSameEnv];
}

/// One observed (visual, auditory) embedding pair and its latent factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub character_id: usize,
    pub environment_id: usize,
    pub snr_db: f64,
    pub v: Embedding,
    pub a: Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub mode: PairMode,
    pub primary: Observation,
    pub partner: Option<Observation>,
}

impl SamplePair {
    /// Checks the mode/partner constraints.
    pub fn is_consistent(&self) -> bool {
        let p = &self.primary;
        match (self.mode, &self.partner) {
            (PairMode::Standard, None) => true,
            (PairMode::SameCharacterDiffEnv, Some(q)) => {
                q.character_id == p.character_id && q.environment_id != p.environment_id
            }
            (PairMode::DiffCharacterSameEnv, Some(q)) => {
                q.character_id != p.character_id && q.environment_id == p.environment_id
            }
            _ => false,
        }
    }
}

fn unit_gaussian(dim: usize, rng: &mut Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = crate::numkernel::norm(&v);
        if n > 1e-8 {
            return Vector::from(v.into_iter().map(|x| x / n).collect::<Vec<_>>());
        }
    }
}

fn non_collinear(vectors: &[Embedding]) -> bool {
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            match cosine_sim(&vectors[i], &vectors[j]) {
                Ok(c) if c.abs() <= MAX_PROTOTYPE_COSINE => {}
                _ => return false,
            }
        }
    }
    true
}

/// Builds the prototypes and mixing map; a pure function of `spec`.
pub fn build_world(spec: &WorldSpec) -> Result<LatentWorld, GenError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let d = spec.dim;
    for _ in 0..MAX_WORLD_ATTEMPTS {
        let timbre: Vec<_> = (0..spec.n_characters).map(|_| unit_gaussian(d, &mut rng)).collect();
        let sound: Vec<_> = (0..spec.n_environments).map(|_| unit_gaussian(d, &mut rng)).collect();
        let face: Vec<_> = (0..spec.n_characters).map(|_| unit_gaussian(d, &mut rng)).collect();
        let scene: Vec<_> = (0..spec.n_environments).map(|_| unit_gaussian(d, &mut rng)).collect();
        let audio: Vec<_> = timbre.iter().chain(&sound).cloned().collect();
        let visual: Vec<_> = face.iter().chain(&scene).cloned().collect();
        if !(non_collinear(&audio) && non_collinear(&visual)) {
            continue;
        }
        let std = 1.0 / ((2 * d) as f64).sqrt();
        let map = (0..d * 2 * d).map(|_| std * rng.normal()).collect();
        return Ok(LatentWorld {
            spec: spec.clone(),
            timbre,
            sound,
            visual_character: face,
            visual_environment: scene,
            visual_map: Tensor2::from_vec(d, 2 * d, map).expect("sized above"),
        });
    }
    Err(GenError::PrototypeCollapse { attempts: MAX_WORLD_ATTEMPTS })
}

/// Amplitude gain applied to the environment term at a given SNR.
pub fn snr_gain(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

impl LatentWorld {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Noise-free auditory embedding for `(c, e)` at `snr_db`.
    pub fn clean_audio(&self, character: usize, environment: usize, snr_db: f64) -> Embedding {
        let g = snr_gain(snr_db);
        let (t, s) = (&self.timbre[character], &self.sound[environment]);
        Vector::from(t.iter().zip(s.iter()).map(|(t, s)| t + g * s).collect::<Vec<_>>())
    }

    /// Noise-free visual embedding for `(c, e)`.
    pub fn clean_visual(&self, character: usize, environment: usize) -> Embedding {
        let concat: Vec<f64> =
            self.visual_character[character].iter().chain(self.visual_environment[environment].iter()).copied().collect();
        let mixed = self.visual_map.matvec(&concat).expect("map is D × 2D");
        if self.spec.linear_visual {
            mixed
        } else {
            // √D·u has unit variance per component.
            let scale = (self.dim() as f64).sqrt() * self.spec.visual_saturation;
            Vector::from(mixed.iter().map(|x| (scale * x).tanh() / scale).collect::<Vec<_>>())
        }
    }

    pub fn observe(&self, character: usize, environment: usize, rng: &mut Rng) -> Observation {
        let [lo, hi] = self.spec.mix_snr_db_range;
        let snr_db = rng.uniform_range(lo, hi);
        let mut a = self.clean_audio(character, environment, snr_db);
        for x in a.iter_mut() {
            *x += self.spec.audio_noise_sigma * rng.normal();
        }
        let mut v = self.clean_visual(character, environment);
        for x in v.iter_mut() {
            *x += self.spec.visual_noise_sigma * rng.normal();
        }
        Observation { character_id: character, environment_id: environment, snr_db, v, a }
    }

    pub fn sample_pair(&self, mode: PairMode, rng: &mut Rng) -> SamplePair {
        let (nc, ne) = (self.spec.n_characters, self.spec.n_environments);
        let c = rng.below(nc);
        let e = rng.below(ne);
        let primary = self.observe(c, e, rng);
        let partner = match mode {
            PairMode::Standard => None,
            PairMode::SameCharacterDiffEnv => {
                let e2 = rng.below_except(ne, e);
                Some(self.observe(c, e2, rng))
            }
            PairMode::DiffCharacterSameEnv => {
                let c2 = rng.below_except(nc, c);
                Some(self.observe(c2, e, rng))
            }
        };
        SamplePair { mode, primary, partner }
    }

    /// One fresh standard pair per `(character, environment)` cell, in row-major id order.
    pub fn grid_pairs(&self, seed: u64) -> Vec<SamplePair> {
        let ne = self.spec.n_environments;
        (0..self.spec.n_characters * ne)
            .map(|i| {
                let mut rng = Rng::substream(seed, i as u64);
                let primary = self.observe(i / ne, i % ne, &mut rng);
                SamplePair { mode: PairMode::Standard, primary, partner: None }
            })
            .collect()
    }
}

/// Per-mode counts for `n` samples, rounded by largest remainder.
pub fn mode_counts(n: usize, mix: [f64; 3]) -> Result<[usize; 3], GenError> {
    let total: f64 = mix.iter().sum();
    if mix.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(GenError::InvalidProportions(mix));
    }
    let exact = mix.map(|p| p * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub world: WorldSpec,
    pub seed: u64,
    pub n_samples: usize,
    pub mode_mix: [f64; 3],
    /// Counts in `standard, same_character_diff_env, diff_character_same_env` order.
    pub counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub manifest: Manifest,
}

/// Generates `n_samples` pairs with mode proportions `mode_mix`.
///
/// The mode sequence is a seeded shuffle; sample `i` draws from its own
/// substream so the output does not depend on generation order.
pub fn make_dataset(world: &LatentWorld, n_samples: usize, mode_mix: [f64; 3], seed: u64) -> Result<Dataset, GenError> {
    let counts = mode_counts(n_samples, mode_mix)?;
    let mut modes: Vec<PairMode> = PairMode::ALL.iter().zip(counts).flat_map(|(&m, k)| std::iter::repeat_n(m, k)).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut modes);
    let base = rng.next_u64();
    let pairs = modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| world.sample_pair(mode, &mut Rng::substream(base, i as u64)))
        .collect();
    Ok(Dataset {
        pairs,
        manifest: Manifest { world: world.spec.clone(), seed, n_samples, mode_mix, counts },
    })
}

// ---- dataset files ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    mode: PairMode,
    #[serde(flatten)]
    primary: Observation,
    partner: Option<Observation>,
}

fn write_floats(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits round-trip any f64.
        write!(out, "{x:.16e}").expect("writing to a String");
    }
    out.push(']');
}

fn write_observation_fields(out: &mut String, o: &Observation) {
    write!(
        out,
        "\"character_id\":{},\"environment_id\":{},\"snr_db\":{:.16e},\"v\":",
        o.character_id, o.environment_id, o.snr_db
    )
    .expect("writing to a String");
    write_floats(out, &o.v);
    out.push_str(",\"a\":");
    write_floats(out, &o.a);
}

/// One JSON object per line.
pub fn encode_record(pair: &SamplePair) -> String {
    let mode = match pair.mode {
        PairMode::Standard => "standard",
        PairMode::SameCharacterDiffEnv => "same_character_diff_env",
        PairMode::DiffCharacterSameEnv => "diff_character_same_env",
    };
    let mut out = format!("{{\"mode\":\"{mode}\",");
    write_observation_fields(&mut out, &pair.primary);
    out.push_str(",\"partner\":");
    match &pair.partner {
        None => out.push_str("null"),
        Some(p) => {
            out.push('{');
            write_observation_fields(&mut out, p);
            out.push('}');
        }
    }
    out.push('}');
    out
}

pub fn decode_record(line: &str) -> Result<SamplePair, GenError> {
    let r: Record = serde_json::from_str(line).map_err(|e| GenError::Parse(e.to_string()))?;
    let pair = SamplePair { mode: r.mode, primary: r.primary, partner: r.partner };
    if !pair.is_consistent() {
        return Err(GenError::Parse(format!("record violates {:?} constraints", pair.mode)));
    }
    Ok(pair)
}

/// `data.jsonl` → `data.manifest.json`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), GenError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for pair in &dataset.pairs {
        writeln!(w, "{}", encode_record(pair))?;
    }
    w.flush()?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| GenError::Parse(e.to_string()))?;
    fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, GenError> {
    let manifest_text = fs::read_to_string(manifest_path(path))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| GenError::Parse(e.to_string()))?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            pairs.push(decode_record(&line)?);
        }
    }
    if pairs.len() != manifest.n_samples {
        return Err(GenError::Parse(format!(
            "manifest lists {} samples but the file holds {}",
            manifest.n_samples,
            pairs.len()
        )));
    }
    Ok(Dataset { pairs, manifest })
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid world spec field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("prototypes stayed collinear after {attempts} attempts")]
    PrototypeCollapse { attempts: usize },
    #[error("mode proportions {0:?} must be non-negative and sum to 1")]
    InvalidProportions([f64; 3]),
    #[error("malformed dataset: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec { n_characters: 3, n_environments: 2, dim: 8, seed: 11, ..WorldSpec::default() }
    }

    #[test]
    fn world_is_deterministic() {
        let spec = small_spec();
        assert_eq!(build_world(&spec).unwrap(), build_world(&spec).unwrap());
    }

    #[test]
    fn seed_changes_world() {
        let a = build_world(&small_spec()).unwrap();
        let b = build_world(&WorldSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(a.timbre, b.timbre);
    }

    #[test]
    fn prototypes_are_not_collinear() {
        let w = build_world(&WorldSpec { n_characters: 2, dim: 32, ..WorldSpec::default() }).unwrap();
        assert!(cosine_sim(&w.timbre[0], &w.timbre[1]).unwrap().abs() <= MAX_PROTOTYPE_COSINE);
    }

    #[test]
    fn one_dimensional_world_collapses() {
        let spec = WorldSpec { dim: 1, ..small_spec() };
        assert!(matches!(build_world(&spec), Err(GenError::PrototypeCollapse { .. })));
    }

    #[test]
    fn spec_validation_names_field() {
        let err = WorldSpec { n_characters: 1, ..small_spec() }.validate().unwrap_err();
        assert!(err.to_string().contains("n_characters"));
        let err = WorldSpec { mix_snr_db_range: [5.0, 1.0], ..small_spec() }.validate().unwrap_err();
        assert!(err.to_string().contains("mix_snr_db_range"));
    }

    #[test]
    fn forced_partner_environment() {
        let w = build_world(&WorldSpec { n_environments: 2, ..small_spec() }).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let p = w.sample_pair(PairMode::SameCharacterDiffEnv, &mut rng);
            let partner = p.partner.as_ref().unwrap();
            assert_eq!(partner.environment_id, 1 - p.primary.environment_id);
            assert!(p.is_consistent());
        }
    }

    #[test]
    fn audio_mix_matches_formula() {
        let spec = WorldSpec { audio_noise_sigma: 0.0, mix_snr_db_range: [10.0, 10.0], ..small_spec() };
        let w = build_world(&spec).unwrap();
        let obs = w.observe(2, 1, &mut Rng::new(0));
        let g = 10f64.powf(-0.5);
        for j in 0..spec.dim {
            let expected = w.timbre[2][j] + g * w.sound[1][j];
            assert!((obs.a[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn high_snr_hides_environment() {
        let spec = WorldSpec { audio_noise_sigma: 0.0, mix_snr_db_range: [200.0, 200.0], ..small_spec() };
        let w = build_world(&spec).unwrap();
        let obs = w.observe(0, 1, &mut Rng::new(0));
        let diff: f64 = obs.a.iter().zip(w.timbre[0].iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6 * w.sound[1].norm());
    }

    #[test]
    fn mode_counts_largest_remainder() {
        assert_eq!(mode_counts(100, [1.0, 0.0, 0.0]).unwrap(), [100, 0, 0]);
        assert_eq!(mode_counts(4, [0.5, 0.25, 0.25]).unwrap(), [2, 1, 1]);
        assert_eq!(mode_counts(10, [1.0 / 3.0; 3]).unwrap(), [4, 3, 3]);
        assert!(matches!(mode_counts(4, [0.5, 0.5, 0.5]), Err(GenError::InvalidProportions(_))));
        assert!(matches!(mode_counts(4, [1.5, -0.5, 0.0]), Err(GenError::InvalidProportions(_))));
    }

    #[test]
    fn grid_covers_every_cell_once() {
        let w = build_world(&small_spec()).unwrap();
        let g = w.grid_pairs(3);
        assert_eq!(g.len(), 6);
        for (i, p) in g.iter().enumerate() {
            assert_eq!((p.primary.character_id, p.primary.environment_id), (i / 2, i % 2));
        }
    }

    #[test]
    fn record_round_trip_is_exact() {
        let w = build_world(&small_spec()).unwrap();
        let mut rng = Rng::new(8);
        for mode in PairMode::ALL {
            let pair = w.sample_pair(mode, &mut rng);
            let line = encode_record(&pair);
            assert_eq!(decode_record(&line).unwrap(), pair);
        }
    }

    #[test]
    fn inconsistent_record_rejected() {
        let w = build_world(&small_spec()).unwrap();
        let mut pair = w.sample_pair(PairMode::SameCharacterDiffEnv, &mut Rng::new(1));
        pair.mode = PairMode::DiffCharacterSameEnv;
        assert!(decode_record(&encode_record(&pair)).is_err());
    }
}

//! Checks against independently computed references: closed-form mixing,
//! least-squares decoders, prototype statistics and chance levels.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use dmsva_core::evaluator::{
    cross_modal_recall, decoupling_margins, predictions, recall_at_k, slot_sweep, BaselineFusion, ComponentRecall, CopyOracle,
    EvalError, EvalOptions, EvalSplit, FusionKind,
};
use dmsva_core::numkernel::{Embedding, Rng, Tensor2};
use dmsva_core::synthgen::{build_world, make_dataset, write_dataset, Observation};
use dmsva_core::*;
use nalgebra::DMatrix;

fn cos(x: &[f64], y: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / (nx * ny)
}

fn noiseless(spec: WorldSpec) -> WorldSpec {
    WorldSpec { visual_noise_sigma: 0.0, audio_noise_sigma: 0.0, ..spec }
}

#[test]
fn mixing_matches_the_stated_formula() {
    let spec = noiseless(WorldSpec { mix_snr_db_range: [10.0, 10.0], seed: 3, ..WorldSpec::default() });
    let world = build_world(&spec).unwrap();
    let gain = 10f64.powf(-10.0 / 20.0);
    let mut rng = Rng::new(9);
    for _ in 0..200 {
        let p = world.sample_pair(PairMode::Standard, &mut rng).primary;
        let (t, s) = (&world.timbre[p.character_id], &world.sound[p.environment_id]);
        for i in 0..spec.dim {
            assert!((p.a[i] - (t[i] + gain * s[i])).abs() <= 1e-15);
        }
    }
}

#[test]
fn very_high_snr_leaves_only_timbre() {
    let spec = noiseless(WorldSpec { mix_snr_db_range: [200.0, 200.0], ..WorldSpec::default() });
    let world = build_world(&spec).unwrap();
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let p = world.sample_pair(PairMode::Standard, &mut rng).primary;
        let t = &world.timbre[p.character_id];
        let s = &world.sound[p.environment_id];
        let dist: f64 = p.a.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 1e-6 * s.norm());
    }
}

#[test]
fn noiseless_audio_identifies_character_and_environment() {
    // Joint nearest-prototype classifier: least-squares fit of a onto span{t_c, s_e}
    // for every (c, e), choosing the smallest residual.
    let spec = noiseless(WorldSpec::default());
    let world = build_world(&spec).unwrap();
    let d = spec.dim;
    let mut rng = Rng::new(77);
    let mut correct = 0;
    for _ in 0..1000 {
        let p = world.sample_pair(PairMode::Standard, &mut rng).primary;
        let a = DMatrix::from_column_slice(d, 1, &p.a);
        let mut best = (f64::INFINITY, 0, 0);
        for c in 0..spec.n_characters {
            for e in 0..spec.n_environments {
                let mut basis = DMatrix::zeros(d, 2);
                basis.column_mut(0).copy_from_slice(&world.timbre[c]);
                basis.column_mut(1).copy_from_slice(&world.sound[e]);
                let coef = basis.clone().svd(true, true).solve(&a, 1e-14).unwrap();
                let resid = (&basis * coef - &a).norm();
                if resid < best.0 {
                    best = (resid, c, e);
                }
            }
        }
        correct += usize::from((best.1, best.2) == (p.character_id, p.environment_id));
    }
    assert_eq!(correct, 1000);
}

#[test]
fn changing_the_seed_changes_the_world() {
    let a = build_world(&WorldSpec::default()).unwrap();
    let b = build_world(&WorldSpec { seed: 1, ..WorldSpec::default() }).unwrap();
    assert!(a.timbre.iter().zip(&b.timbre).any(|(x, y)| x != y));
    assert_eq!(a, build_world(&WorldSpec::default()).unwrap());
}

#[test]
fn dataset_files_hash_identically() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for run in 0..2 {
        let ds = make_dataset(&world, 300, [0.5, 0.25, 0.25], 42).unwrap();
        let path = dir.path().join(format!("run{run}.jsonl"));
        write_dataset(&path, &ds).unwrap();
        let mut h = DefaultHasher::new();
        std::fs::read(&path).unwrap().hash(&mut h);
        hashes.push(h.finish());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn least_squares_concat_fusion_is_perfect_on_a_noiseless_linear_world() {
    let spec = noiseless(WorldSpec { mix_snr_db_range: [10.0, 10.0], ..WorldSpec::default() });
    let world = build_world(&spec).unwrap();
    let pairs = world.grid_pairs(5);
    let d = spec.dim;
    let v = DMatrix::from_row_iterator(pairs.len(), d, pairs.iter().flat_map(|p| p.primary.v.iter().copied()));
    let a = DMatrix::from_row_iterator(pairs.len(), d, pairs.iter().flat_map(|p| p.primary.a.iter().copied()));
    // Solve V Pᵀ = A in the least-squares sense.
    let pt = v.clone().svd(true, true).solve(&a, 1e-10).unwrap();
    assert!((&v * &pt - &a).norm() < 1e-8, "audio should be an exact linear function of vision");
    let p = pt.transpose();
    let rows: Vec<Vec<f64>> = (0..d).map(|r| p.row(r).iter().copied().collect()).collect();
    let model = BaselineFusion { kind: FusionKind::ConcatFusion, params: vec![Tensor2::from_rows(&rows).unwrap()] };
    assert_eq!(recall_at_k(&model, &pairs, 1).unwrap(), 1.0);
}

fn chance_world() -> LatentWorld {
    build_world(&WorldSpec { n_characters: 16, n_environments: 16, ..WorldSpec::default() }).unwrap()
}

#[test]
fn untrained_model_recall_is_at_chance() {
    let world = chance_world();
    let pairs = world.grid_pairs(8);
    assert_eq!(pairs.len(), 256);
    for seed in 0..3 {
        let model = DmsvaModel::random(32, 32, 0.07, &mut Rng::new(seed)).unwrap();
        assert!(recall_at_k(&model, &pairs, 1).unwrap() < 0.05);
    }
}

#[test]
fn zero_initialized_baselines_are_at_chance() {
    let world = chance_world();
    let pairs = world.grid_pairs(8);
    for kind in [FusionKind::ConcatFusion, FusionKind::AttnFusion] {
        let model = BaselineFusion::zeros(kind, 32, 16);
        assert!(recall_at_k(&model, &pairs, 1).unwrap() < 0.05);
    }
    let single = BaselineFusion::random(FusionKind::AttnFusion, 32, 1, &mut Rng::new(2));
    assert!(recall_at_k(&single, &pairs, 1).unwrap() < 0.05);
}

#[test]
fn copy_oracle_and_full_k_give_perfect_recall() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let pairs = world.grid_pairs(3);
    assert_eq!(recall_at_k(&CopyOracle, &pairs, 1).unwrap(), 1.0);
    let model = DmsvaModel::random(8, 32, 0.07, &mut Rng::new(0)).unwrap();
    assert_eq!(recall_at_k(&model, &pairs, pairs.len()).unwrap(), 1.0);
    assert!(matches!(recall_at_k(&model, &pairs, pairs.len() + 1), Err(EvalError::TooFewPairs { .. })));
}

/// Returns the world's own prototypes for each observation's labels.
struct PrototypeOracle<'a>(&'a LatentWorld);

impl ComponentRecall for PrototypeOracle<'_> {
    fn components(&self, obs: &Observation) -> Result<(Embedding, Embedding), EvalError> {
        Ok((self.0.timbre[obs.character_id].clone(), self.0.sound[obs.environment_id].clone()))
    }
}

fn mean_cross_cosine(protos: &[Embedding]) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for i in 0..protos.len() {
        for j in 0..protos.len() {
            if i != j {
                sum += cos(&protos[i], &protos[j]);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn prototype_oracle_margins_match_prototype_statistics() {
    for seed in 0..10 {
        let world = build_world(&WorldSpec { seed, ..WorldSpec::default() }).unwrap();
        let m = decoupling_margins(&PrototypeOracle(&world), &world, 2000, seed).unwrap();
        let expect_t = 1.0 - mean_cross_cosine(&world.timbre);
        let expect_e = 1.0 - mean_cross_cosine(&world.sound);
        assert!((m.timbre - expect_t).abs() < 0.02, "seed {seed}: {} vs {expect_t}", m.timbre);
        assert!((m.env - expect_e).abs() < 0.02, "seed {seed}: {} vs {expect_e}", m.env);
        // All ten seeds positive: one-sided sign test p = 2^-10.
        assert!(m.timbre > 0.0 && m.env > 0.0);
    }
}

#[test]
fn identical_prototypes_give_zero_margins() {
    let spec = noiseless(WorldSpec::default());
    let mut world = build_world(&spec).unwrap();
    for protos in [&mut world.timbre, &mut world.sound, &mut world.visual_character, &mut world.visual_environment] {
        let first = protos[0].clone();
        protos.iter_mut().for_each(|p| *p = first.clone());
    }
    world.spec.mix_snr_db_range = [10.0, 10.0];
    let model = DmsvaModel::random(16, 32, 0.07, &mut Rng::new(4)).unwrap();
    let m = decoupling_margins(&model, &world, 100, 0).unwrap();
    assert!(m.timbre.abs() < 1e-12 && m.env.abs() < 1e-12, "{m:?}");
}

#[test]
fn untrained_margins_are_at_chance() {
    let margins = |tau: f64| -> Vec<(f64, f64)> {
        (0..10u64)
            .map(|seed| {
                let world = build_world(&WorldSpec { seed, ..WorldSpec::default() }).unwrap();
                let model = DmsvaModel::random(32, 32, tau, &mut Rng::new(seed + 100)).unwrap();
                let m = decoupling_margins(&model, &world, 200, seed).unwrap();
                (m.timbre, m.env)
            })
            .collect()
    };
    // Literal cosine softmax: every seed is near zero.
    for (t, e) in margins(1.0) {
        assert!(t.abs() < 0.1 && e.abs() < 0.1);
    }
    // Sharp attention makes single random models noisier; the seed average is still null.
    let sharp = margins(0.07);
    for pick in [|m: &(f64, f64)| m.0, |m: &(f64, f64)| m.1] {
        let xs: Vec<f64> = sharp.iter().map(pick).collect();
        let mean = xs.iter().sum::<f64>() / 10.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let t = mean / (sd / 10f64.sqrt());
        assert!(mean.abs() < 0.1, "mean margin {mean}");
        assert!(t.abs() < 3.25, "t = {t} (two-sided 1% critical value, 9 dof)");
    }
}

#[test]
fn recall_is_monotone_in_k() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let pairs = world.grid_pairs(1);
    let model = DmsvaModel::random(16, 32, 0.07, &mut Rng::new(6)).unwrap();
    let preds = predictions(&model, &pairs).unwrap();
    let targets: Vec<Embedding> = pairs.iter().map(|p| p.primary.a.clone()).collect();
    let mut last = 0.0;
    for k in 1..=pairs.len() {
        let r = cross_modal_recall(&preds, &targets, k).unwrap();
        assert!(r >= last);
        last = r;
    }
}

#[test]
fn slot_sweep_recall_does_not_drop_from_8_to_32() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let ds = make_dataset(&world, 2048, [0.5, 0.25, 0.25], 0).unwrap();
    let opts = EvalOptions::default();
    let split = EvalSplit::grid(&world, &opts);
    let rows = slot_sweep(&[8, 32], &ds.pairs, &world, &split, &TrainConfig::default(), &opts).unwrap();
    assert_eq!(rows[0].slot_count, Some(8));
    assert!(rows[1].recall_at_1 >= rows[0].recall_at_1, "{} then {}", rows[0].recall_at_1, rows[1].recall_at_1);
}

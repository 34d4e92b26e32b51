use dmsva_core::synthgen::{build_world, make_dataset, read_dataset, write_dataset, Dataset};
use dmsva_core::trainer::{init_model, Checkpoint, TrainError, FORMAT_VERSION};
use dmsva_core::{fit, TrainConfig, Trainer, WorldSpec};

fn small() -> (Dataset, TrainConfig) {
    let world = build_world(&WorldSpec { dim: 8, ..WorldSpec::default() }).unwrap();
    let ds = make_dataset(&world, 200, [0.5, 0.25, 0.25], 1).unwrap();
    (ds, TrainConfig { slot_count: 6, batch_size: 8, steps: 30, seed: 4, ..TrainConfig::default() })
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let (ds, cfg) = small();
    let ckpt = fit(&ds.pairs, &cfg).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    for (a, b) in back.banks.iter().zip(&ckpt.banks) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.encode(), std::fs::read(&path).unwrap());
}

#[test]
fn every_truncation_is_reported_as_corrupt() {
    let (ds, cfg) = small();
    let bytes = fit(&ds.pairs, &TrainConfig { steps: 2, ..cfg }).unwrap().checkpoint.encode();
    for cut in (0..bytes.len()).step_by(13) {
        assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(TrainError::CorruptFile(_))), "cut at {cut}");
    }
}

#[test]
fn flipped_bytes_and_bad_magic_are_corrupt() {
    let (ds, cfg) = small();
    let bytes = fit(&ds.pairs, &TrainConfig { steps: 2, ..cfg }).unwrap().checkpoint.encode();
    for pos in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(Checkpoint::decode(&bad), Err(TrainError::CorruptFile(_))), "flip at {pos}");
    }
}

#[test]
fn other_versions_are_rejected() {
    let (ds, cfg) = small();
    let mut ckpt = fit(&ds.pairs, &TrainConfig { steps: 1, ..cfg }).unwrap().checkpoint;
    ckpt.version = FORMAT_VERSION + 1;
    match Checkpoint::decode(&ckpt.encode()) {
        Err(TrainError::VersionMismatch { found, expected }) => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}

#[test]
fn resuming_through_a_file_matches_an_uninterrupted_run() {
    let (ds, cfg) = small();
    let full = fit(&ds.pairs, &cfg).unwrap();

    let mut first = Trainer::new(init_model(&cfg, 8).unwrap(), cfg.clone()).unwrap();
    let head = first.run_until(&ds.pairs, 11, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    let tail = resumed.run_until(&ds.pairs, cfg.steps, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint.encode());
    let joined: Vec<_> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, full.history);
}

#[test]
fn resuming_may_only_extend_the_run() {
    let (ds, cfg) = small();
    let ckpt = fit(&ds.pairs, &TrainConfig { steps: 3, ..cfg.clone() }).unwrap().checkpoint;
    let longer = TrainConfig { steps: 50, checkpoint_every: 10, ..cfg.clone() };
    assert!(Trainer::from_checkpoint(ckpt.clone()).unwrap().with_config(longer).is_ok());
    let changed = TrainConfig { lr: 0.5, ..cfg };
    assert!(matches!(Trainer::from_checkpoint(ckpt).unwrap().with_config(changed), Err(TrainError::InvalidConfig { .. })));
}

#[test]
fn dataset_files_round_trip() {
    let (ds, _) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.pairs, ds.pairs);
    assert_eq!(back.manifest, ds.manifest);
}

mod common;

use std::collections::BTreeMap;

use common::*;
use interlingua::checkpoint::Checkpoint;
use interlingua::training::{train, Frozen, TrainConfig};
use interlingua::transformer::ModelConfig;
use interlingua::Error;

fn model() -> ModelConfig {
    ModelConfig { num_blocks: 1, num_heads: 2, d_model: 8, d_ff: 16, vocab_size: 64, max_len: 16, dropout: 0.1 }
}

fn trained(steps: u64) -> (Toy, Checkpoint) {
    let toy = toy(8, 9);
    let cfg = TrainConfig { quantize: true, batch_size: 4, ..TrainConfig::default() };
    let (system, state, _) = run(&toy, &model(), &cfg, steps);
    (toy, Checkpoint { system, state, train: cfg, is_final: false })
}

#[test]
fn file_round_trip_is_byte_stable() {
    let (_, ckpt) = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a, None).unwrap();
    assert_eq!(loaded.system, ckpt.system);
    assert_eq!(loaded.state, ckpt.state);
    assert_eq!(loaded.train, ckpt.train);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!dir.path().join("a.ckpt.tmp").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (toy, mid) = trained(2);
    let mut resumed = Checkpoint::from_bytes(&mid.to_bytes().unwrap()).unwrap();
    train(&mut resumed.system, &mut resumed.state, &toy.xy, &mid.train, 2, &Frozen::default(), |_, _, _| Ok(())).unwrap();
    let (_, straight) = trained(4);
    assert_eq!(resumed.system, straight.system);
    assert_eq!(resumed.state, straight.state);
}

#[test]
fn vocabulary_hash_guard() {
    let (toy, ckpt) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    let mut hashes: BTreeMap<String, String> =
        [("x".into(), toy.x.vocab.content_hash()), ("y".into(), toy.y.vocab.content_hash())].into();
    assert!(Checkpoint::load(&path, Some(&hashes)).is_ok());
    hashes.insert("y".into(), toy.z.vocab.content_hash());
    assert!(matches!(Checkpoint::load(&path, Some(&hashes)), Err(Error::Checkpoint(_))));
}

#[test]
fn corrupt_files_are_rejected() {
    let (_, ckpt) = trained(1);
    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.extend([0u8; 8]);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"short"), Err(Error::Checkpoint(_))));
    let missing = tempfile::tempdir().unwrap().path().join("nope.ckpt");
    assert!(matches!(Checkpoint::load(&missing, None), Err(Error::Io { .. })));
}

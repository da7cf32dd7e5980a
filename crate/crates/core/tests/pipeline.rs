//! End-to-end training pipeline checks: resume determinism, logs, and
//! checkpoint contents.

mod common;

use std::fs;

use dehaze::checkpoint;
use dehaze::network::{DecoderVariant, NetworkConfig};
use dehaze::training::{self, checkpoint_path, TrainConfig};

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        levels: 2,
        resblocks: 1,
        base_channels: 4,
        max_channels: 64,
        decoder_variant: DecoderVariant::Sos,
        dff_enabled: true,
        refinement_blocks: 1,
    }
}

fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        patch: 16,
        steps_per_epoch: Some(3),
        scale_min: 1.0,
        scale_max: 1.0,
        flip: false,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn resume_bit_matches_uninterrupted_run() {
    let pairs = common::synthetic_pairs(50, 3, 32);
    let net = tiny_net();

    let full_dir = tempfile::tempdir().unwrap();
    training::train(&net, &tiny_train(4, 9), &pairs, &pairs, full_dir.path(), None).unwrap();

    // Re-run the first two epochs, then resume from the epoch-2 checkpoint.
    let split_dir = tempfile::tempdir().unwrap();
    training::train(&net, &tiny_train(2, 9), &pairs, &pairs, split_dir.path(), None).unwrap();
    training::train(
        &net,
        &tiny_train(4, 9),
        &pairs,
        &pairs,
        split_dir.path(),
        Some(&checkpoint_path(split_dir.path(), 2)),
    )
    .unwrap();

    let a = fs::read(full_dir.path().join("final.msbc")).unwrap();
    let b = fs::read(split_dir.path().join("final.msbc")).unwrap();
    assert_eq!(a, b, "resumed run diverged from the uninterrupted run");
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let pairs = common::synthetic_pairs(51, 2, 32);
    let net = tiny_net();
    let dir = tempfile::tempdir().unwrap();
    let report = training::train(&net, &tiny_train(2, 3), &pairs, &pairs, dir.path(), None).unwrap();

    assert_eq!(report.epochs_run, 2);
    assert_eq!(report.steps, 6);
    assert!(report.final_loss.is_finite());

    for epoch in 0..=2 {
        assert!(checkpoint_path(dir.path(), epoch).exists());
    }
    assert!(dir.path().join("final.msbc").exists());

    let train_log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = train_log.lines().collect();
    assert_eq!(lines[0], "step,epoch,lr,loss");
    assert_eq!(lines.len(), 7, "expected one row per step plus header");

    let val_log = fs::read_to_string(dir.path().join("val_log.csv")).unwrap();
    assert_eq!(val_log.lines().next().unwrap(), "epoch,val_psnr,val_ssim");
    assert_eq!(val_log.lines().count(), 3);
}

#[test]
fn final_checkpoint_reloads_and_reports_trained_step() {
    let pairs = common::synthetic_pairs(52, 2, 32);
    let net = tiny_net();
    let dir = tempfile::tempdir().unwrap();
    training::train(&net, &tiny_train(2, 11), &pairs, &pairs, dir.path(), None).unwrap();

    let (cp, store) = checkpoint::load(&dir.path().join("final.msbc")).unwrap();
    assert_eq!(cp.network, net);
    assert_eq!(cp.epoch, 2);
    assert_eq!(cp.step, 6);
    assert!(store.total_scalars() > 0);
}

#[test]
fn resume_rejects_mismatched_network_config() {
    let pairs = common::synthetic_pairs(53, 2, 32);
    let net = tiny_net();
    let dir = tempfile::tempdir().unwrap();
    training::train(&net, &tiny_train(1, 5), &pairs, &pairs, dir.path(), None).unwrap();

    let mut other = net;
    other.base_channels = 8;
    let err = training::train(
        &other,
        &tiny_train(2, 5),
        &pairs,
        &pairs,
        dir.path(),
        Some(&checkpoint_path(dir.path(), 1)),
    )
    .unwrap_err();
    assert!(err.to_string().contains("does not match"));
}

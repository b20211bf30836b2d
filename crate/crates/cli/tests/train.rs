mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppg_cli::checkpoint::Checkpoint;
use rppg_cli::data::{open_split, Split};
use rppg_cli::train::{draw_sample, sample_grads, train, BEST_CKPT, LAST_CKPT, TRAIN_LOG};
use rppg_core::backbone::Model;

#[test]
fn smoke_run_loss_is_finite_and_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = common::smoke_data(&data);
    let out = train(&cfg, &data, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.history.len(), 2);
    let (e1, e2) = (&out.history[0], &out.history[1]);
    assert!(e1.total.is_finite() && e2.total.is_finite());
    assert!(e2.total < e1.total, "{} then {}", e1.total, e2.total);
    assert!(e1.val_mae_bpm.is_finite());

    let log = fs::read_to_string(dir.path().join("run").join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch=1", "l_time=", "l_fre=", "l_crc=", "total=", "val_mae_bpm="] {
        assert!(lines[0].contains(key), "{key} missing from {}", lines[0]);
    }
    assert!(dir.path().join("run").join(BEST_CKPT).exists());
    let ck = Checkpoint::load(&out.last).unwrap();
    assert_eq!((ck.epoch, ck.step), (2, 2));
    assert_eq!(ck.history().unwrap(), out.history);
}

#[test]
fn zero_alpha_leaves_crc_out_of_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::smoke_data(dir.path());
    cfg.train.alpha = 0.0;
    let model = Model::new(cfg.model.clone(), cfg.flow.clone(), 1).unwrap();
    let videos = open_split(dir.path(), Split::Train).unwrap();
    let sample = draw_sample(&videos[0], &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (terms, _) = sample_grads(&model, &sample, &cfg).unwrap();
    assert!(terms[2] > 0.0, "views should disagree: crc {}", terms[2]);
    assert_eq!(terms[3], terms[0] + terms[1]);

    let out = train(&cfg, dir.path(), &dir.path().join("run"), None).unwrap();
    for h in &out.history {
        assert!(h.l_crc > 0.0);
        assert!((h.total - (h.l_time + h.l_fre)).abs() <= 1e-12 * h.total.abs());
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = common::smoke_data(&data);
    let full = train(&cfg, &data, &dir.path().join("full"), None).unwrap();

    let mut first = cfg.clone();
    first.train.epochs = 1;
    let part = dir.path().join("part");
    train(&first, &data, &part, None).unwrap();
    let resumed = train(&cfg, &data, &part, Some(&part.join(LAST_CKPT))).unwrap();

    assert_eq!(resumed.history, full.history);
    assert_eq!(fs::read(&resumed.last).unwrap(), fs::read(&full.last).unwrap());
    assert_eq!(
        fs::read_to_string(part.join(TRAIN_LOG)).unwrap(),
        fs::read_to_string(dir.path().join("full").join(TRAIN_LOG)).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = common::smoke_data(&data);
    cfg.train.epochs = 1;
    let run = dir.path().join("run");
    train(&cfg, &data, &run, None).unwrap();
    cfg.train.epochs = 2;
    cfg.train.lr *= 2.0;
    let err = train(&cfg, &data, &run, Some(&run.join(LAST_CKPT))).unwrap_err().to_string();
    assert!(err.contains("different config"), "{err}");
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = train(&common::smoke_config(), dir.path(), &dir.path().join("run"), None).unwrap_err();
    assert!(format!("{err:#}").contains("manifest"), "{err:#}");
}

#[test]
fn divergence_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::smoke_data(dir.path());
    cfg.train.lr = 1e200;
    cfg.train.batch = 1;
    cfg.train.epochs = 3;
    let err = train(&cfg, dir.path(), &dir.path().join("run"), None).unwrap_err().to_string();
    assert!(err.contains("non-finite loss at step"), "{err}");
}

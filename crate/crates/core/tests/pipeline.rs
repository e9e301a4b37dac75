//! Small end-to-end runs of the harness commands.

use std::fs;
use std::path::Path;

use sarfuse::config::TrainConfig;
use sarfuse::harness::{build_network, cmd_ablate, cmd_eval, cmd_export_maps, cmd_gen_data, cmd_pretrain_gan, cmd_train, eval_network};
use sarfuse::pgm::GrayImage;
use sarfuse::segnet::AblationConfig;
use sarfuse::synthdata::SplitCounts;
use sarfuse::Error;

fn tiny(root: &Path) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        gan_iterations: 4,
        image_size: 32,
        data_dir: root.join("data"),
        gan_checkpoint: root.join("gan.ckpt"),
        run_dir: root.join("run"),
        splits: SplitCounts { train: 8, val: 4, test: 4 },
        ..Default::default()
    }
}

fn prepared(root: &Path) -> TrainConfig {
    let cfg = tiny(root);
    cmd_gen_data(&cfg).unwrap();
    cmd_pretrain_gan(&cfg).unwrap();
    cfg
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let gan_log = fs::read_to_string(cfg.gan_log_path()).unwrap();
    assert_eq!(gan_log.lines().count(), cfg.gan_iterations);

    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    let metrics = fs::read_to_string(cfg.metrics_path()).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let record: serde_json::Value = serde_json::from_str(metrics.trim()).unwrap();
    assert!(record.get("wall_ms").is_none());
    assert_eq!(record["lr"], 0.01);
    assert!(cfg.best_checkpoint().exists() && cfg.last_checkpoint().exists());

    let report = cmd_eval(&cfg, &cfg.best_checkpoint(), "test").unwrap();
    assert_eq!(report.samples, 4);
    assert_eq!(report.confusion.iter().flatten().sum::<u64>(), 4 * 32 * 32);
    assert!((0.0..=1.0).contains(&report.fwiou));
    let (cm, _) = eval_network(&out.net, &cfg, "test").unwrap();
    assert_eq!(cm.fwiou().unwrap(), report.fwiou);

    let maps = dir.path().join("maps");
    let files = cmd_export_maps(&cfg, &cfg.best_checkpoint(), "test", &maps).unwrap();
    assert_eq!(files.len(), 4);
    for f in &files {
        let pred = GrayImage::load(&f.prediction).unwrap();
        assert_eq!((pred.width, pred.height), (32, 32));
        assert!(pred.pixels.iter().all(|&p| p == 0 || p == 255));
        let montage = GrayImage::load(&f.montage).unwrap();
        assert_eq!((montage.width, montage.height), (4 * 32, 32));
    }
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(&f.prediction).unwrap()).collect();
    let again = cmd_export_maps(&cfg, &cfg.best_checkpoint(), "test", &maps).unwrap();
    let second: Vec<Vec<u8>> = again.iter().map(|f| fs::read(&f.prediction).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn runs_are_reproducible() {
    let run = |root: &Path| {
        let cfg = TrainConfig { epochs: 2, ..prepared(root) };
        cmd_train(&cfg).unwrap();
        (
            fs::read(&cfg.gan_checkpoint).unwrap(),
            fs::read(cfg.metrics_path()).unwrap(),
            fs::read(cfg.last_checkpoint()).unwrap(),
            fs::read(cfg.data_dir.join("train/00000_sar.pgm")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(a.path()) == run(b.path()));
}

#[test]
fn training_beats_the_untrained_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ablation: AblationConfig::BODY,
        splits: SplitCounts { train: 16, val: 4, test: 8 },
        ..tiny(dir.path())
    };
    cmd_gen_data(&cfg).unwrap();
    let before = eval_network(&build_network(&cfg).unwrap(), &cfg, "test").unwrap().0.fwiou().unwrap();
    cmd_train(&cfg).unwrap();
    let after = cmd_eval(&cfg, &cfg.best_checkpoint(), "test").unwrap().fwiou;
    assert!(after > before, "trained {after} vs untrained {before}");
}

#[test]
fn ablation_writes_a_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let report = cmd_ablate(&cfg).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Body", "+GAN", "+GAN+Att", "+GAN+Att+Combine"]);
    for (_, ab) in AblationConfig::TABLE {
        assert!(report.row(ab).is_some());
    }
    let text = fs::read_to_string(cfg.run_dir.join("ablation.txt")).unwrap();
    assert_eq!(text, report.to_text());
    assert!(cfg.run_dir.join("ablation.json").exists());
}

#[test]
fn failures_carry_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.splits.test = 0;
    cmd_gen_data(&cfg).unwrap();
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))), "missing GAN checkpoint");
    cmd_pretrain_gan(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    assert!(matches!(cmd_eval(&cfg, &cfg.best_checkpoint(), "test"), Err(Error::Domain(_))));
    assert!(matches!(cmd_eval(&cfg, &dir.path().join("nope.ckpt"), "val"), Err(Error::Io { .. })));
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert!(matches!(cmd_eval(&cfg, &dir.path().join("junk.ckpt"), "val"), Err(Error::Checkpoint(_))));
    let body = TrainConfig { ablation: AblationConfig::BODY, ..cfg.clone() };
    assert!(matches!(cmd_eval(&body, &cfg.best_checkpoint(), "val"), Err(Error::Checkpoint(_))));
}

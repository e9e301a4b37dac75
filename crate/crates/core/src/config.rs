//! Run configuration shared by every harness command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::losses::{BCE_WEIGHT, DICE_WEIGHT};
use crate::segnet::{AblationConfig, SegNetConfig};
use crate::synthdata::{SceneSpec, SplitCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Must stay `(1, 3)`; present so configs state the ratio explicitly.
    pub loss_ratio_dice_bce: (f64, f64),
    pub gan_iterations: usize,
    /// Seeds the dataset, network initialization, shuffling and GAN sampling.
    pub seed: u64,
    pub image_size: usize,
    pub ablation: AblationConfig,
    pub data_dir: PathBuf,
    pub gan_checkpoint: PathBuf,
    /// Receives `best.ckpt`, `last.ckpt`, `metrics.jsonl` and ablation reports.
    pub run_dir: PathBuf,
    /// Scene knobs; `image_size` and `seed` come from the fields above.
    pub scene: SceneSpec,
    pub splits: SplitCounts,
    pub segnet: SegNetConfig,
    pub gan: GanConfig,
    /// Upper bound on SAR images drawn from the train split for GAN pretraining.
    pub gan_sar_count: usize,
    /// Optical images taken from the end of the train split for GAN pretraining.
    pub gan_optical_count: usize,
    /// Adds `wall_ms` to metrics records, which makes them nondeterministic.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr_init: 0.01,
            lr_min: 1e-5,
            weight_decay: 5e-4,
            loss_ratio_dice_bce: (DICE_WEIGHT, BCE_WEIGHT),
            gan_iterations: 500,
            seed: 0,
            image_size: 64,
            ablation: AblationConfig::FULL,
            data_dir: PathBuf::from("data"),
            gan_checkpoint: PathBuf::from("runs/gan.ckpt"),
            run_dir: PathBuf::from("runs/seg"),
            scene: SceneSpec::default(),
            splits: SplitCounts::default(),
            segnet: SegNetConfig::default(),
            gan: GanConfig::default(),
            gan_sar_count: 300,
            gan_optical_count: 50,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec { image_size: self.image_size, seed: self.seed, ..self.scene.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg(format!("epochs and batch_size must be >= 1, got {} and {}", self.epochs, self.batch_size));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init && self.lr_init.is_finite()) {
            return cfg(format!("need 0 < lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        if !(self.weight_decay >= 0.0) {
            return cfg(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.loss_ratio_dice_bce != (DICE_WEIGHT, BCE_WEIGHT) {
            return cfg(format!("the dice:bce ratio is fixed at 1:3, got {:?}", self.loss_ratio_dice_bce));
        }
        if self.gan_optical_count == 0 || self.gan_sar_count == 0 {
            return cfg("gan_sar_count and gan_optical_count must be >= 1".into());
        }
        self.ablation.validate()?;
        self.segnet.validate()?;
        self.scene_spec().validate()
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.run_dir.join("best.ckpt")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.run_dir.join("last.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.jsonl")
    }

    pub fn gan_log_path(&self) -> PathBuf {
        self.gan_checkpoint.with_extension("jsonl")
    }
}

/// Cosine annealing from `lr_init` at epoch 0 to `lr_min` at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_init);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.gan_iterations), (100, 8, 500));
        assert_eq!((c.lr_init, c.lr_min, c.weight_decay), (0.01, 1e-5, 5e-4));
        assert_eq!(c.loss_ratio_dice_bce, (1.0, 3.0));
        c.validate().unwrap();
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.01);
        assert!((lr_schedule(99, &c).unwrap() - 1e-5).abs() < 1e-18);
        let odd = TrainConfig { epochs: 21, ..c.clone() };
        assert!((lr_schedule(10, &odd).unwrap() - 0.005005).abs() < 1e-12);
        assert!(matches!(lr_schedule(100, &c), Err(Error::Contract(_))));
        let one = TrainConfig { epochs: 1, ..c };
        assert_eq!(lr_schedule(0, &one).unwrap(), 0.01);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = TrainConfig::default();
        for bad in [
            TrainConfig { epochs: 0, ..c.clone() },
            TrainConfig { batch_size: 0, ..c.clone() },
            TrainConfig { lr_min: 0.1, ..c.clone() },
            TrainConfig { loss_ratio_dice_bce: (1.0, 1.0), ..c.clone() },
            TrainConfig { image_size: 40, ..c.clone() },
            TrainConfig { ablation: AblationConfig { use_combine: true, ..AblationConfig::BODY }, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = TrainConfig { epochs: 3, ..Default::default() };
        fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), c);
        fs::write(&path, r#"{"epochs": 7, "ablation": {"use_gan": false}}"#).unwrap();
        let p = TrainConfig::load(&path).unwrap();
        assert_eq!(p.epochs, 7);
        assert_eq!(p.batch_size, 8);
        assert!(!p.ablation.use_gan);
        fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        assert!(matches!(TrainConfig::load(&path), Err(Error::Config(_))));
    }
}

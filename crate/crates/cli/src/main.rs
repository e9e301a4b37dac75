use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sarfuse::config::TrainConfig;
use sarfuse::harness;
use sarfuse::{Error, Result};

/// SAR marine-farm segmentation with GAN fusion and external attention.
///
/// Settings come from `--config` (JSON, any subset of fields) and are then
/// overridden by flags. Set RUST_LOG=info for progress output.
#[derive(Debug, Parser)]
#[command(name = "sarfuse", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData,
    /// Pretrain the SAR/optical GAN and save its checkpoint.
    PretrainGan,
    /// Train the segmentation network.
    Train,
    /// Report FwIoU and per-class IoU of a checkpoint on one split.
    Eval(Target),
    /// Train and test the four ablation configurations.
    Ablate,
    /// Write thresholded prediction maps and montages.
    ExportMaps {
        #[command(flatten)]
        target: Target,
        /// Output directory (default: <run-dir>/maps/<split>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Target {
    /// Segmentation checkpoint (default: <run-dir>/best.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Default, Args)]
struct Overrides {
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr_init: Option<f64>,
    #[arg(long, global = true)]
    lr_min: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    gan_iterations: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    gan_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    use_gan: Option<bool>,
    #[arg(long, global = true)]
    use_attention: Option<bool>,
    #[arg(long, global = true)]
    use_combine: Option<bool>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_val: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    width_mult: Option<f64>,
    #[arg(long, global = true)]
    depth_mult: Option<f64>,
    #[arg(long, global = true)]
    resolution_mult: Option<usize>,
    #[arg(long, global = true)]
    gan_sar_count: Option<usize>,
    #[arg(long, global = true)]
    gan_optical_count: Option<usize>,
    #[arg(long, global = true)]
    record_wall_time: bool,
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut c.epochs, &self.epochs);
        set(&mut c.batch_size, &self.batch_size);
        set(&mut c.lr_init, &self.lr_init);
        set(&mut c.lr_min, &self.lr_min);
        set(&mut c.weight_decay, &self.weight_decay);
        set(&mut c.gan_iterations, &self.gan_iterations);
        set(&mut c.seed, &self.seed);
        set(&mut c.image_size, &self.image_size);
        set(&mut c.data_dir, &self.data_dir);
        set(&mut c.gan_checkpoint, &self.gan_checkpoint);
        set(&mut c.run_dir, &self.run_dir);
        set(&mut c.ablation.use_gan, &self.use_gan);
        set(&mut c.ablation.use_attention, &self.use_attention);
        set(&mut c.ablation.use_combine, &self.use_combine);
        set(&mut c.splits.train, &self.n_train);
        set(&mut c.splits.val, &self.n_val);
        set(&mut c.splits.test, &self.n_test);
        set(&mut c.segnet.width_mult, &self.width_mult);
        set(&mut c.segnet.depth_mult, &self.depth_mult);
        set(&mut c.segnet.resolution_mult, &self.resolution_mult);
        set(&mut c.gan_sar_count, &self.gan_sar_count);
        set(&mut c.gan_optical_count, &self.gan_optical_count);
        c.record_wall_time |= self.record_wall_time;
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    let checkpoint = |t: &Target| t.checkpoint.clone().unwrap_or_else(|| cfg.best_checkpoint());
    match &cli.command {
        Command::GenData => {
            let manifest = harness::cmd_gen_data(&cfg)?;
            let counts: std::collections::BTreeMap<_, _> = manifest.iter().map(|(k, v)| (k, v.len())).collect();
            print_json(&serde_json::json!({ "data_dir": cfg.data_dir, "splits": counts }));
        }
        Command::PretrainGan => {
            harness::cmd_pretrain_gan(&cfg)?;
            print_json(&serde_json::json!({
                "checkpoint": cfg.gan_checkpoint,
                "log": cfg.gan_log_path(),
                "iterations": cfg.gan_iterations,
            }));
        }
        Command::Train => {
            let out = harness::cmd_train(&cfg)?;
            print_json(&serde_json::json!({
                "epochs": out.records.len(),
                "best_epoch": out.best_epoch,
                "best_val_fwiou": out.best_val_fwiou,
                "best_checkpoint": cfg.best_checkpoint(),
                "last_checkpoint": cfg.last_checkpoint(),
                "metrics": cfg.metrics_path(),
            }));
        }
        Command::Eval(t) => print_json(&harness::cmd_eval(&cfg, &checkpoint(t), &t.split)?),
        Command::Ablate => {
            let report = harness::cmd_ablate(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::ExportMaps { target, out } => {
            let out = out.clone().unwrap_or_else(|| cfg.run_dir.join("maps").join(&target.split));
            let files = harness::cmd_export_maps(&cfg, &checkpoint(target), &target.split, &out)?;
            print_json(&serde_json::json!({ "out": out, "samples": files.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

//! Command implementations behind the CLI: data generation, GAN pretraining,
//! segmentation training, evaluation, the ablation matrix and map export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{lr_schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::gan::{pretrain_gan, GanPair, GeneratorNet, Net};
use crate::losses::segmentation_loss;
use crate::metrics::ConfusionMatrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Mode, Session};
use crate::pgm::GrayImage;
use crate::segnet::{AblationConfig, FusionSegNet};
use crate::synthdata::{make_dataset, Dataset, Manifest, StoredSample, FARM, WATER};
use crate::tensor::Tensor;

/// Samples evaluated per inference batch.
const EVAL_BATCH: usize = 8;

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes") + "\n"
}

fn open_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    Dataset::open(&cfg.data_dir).map_err(|e| match e {
        Error::Io { path, .. } => Error::Config(format!("no dataset at {} (run gen-data first)", path.display())),
        other => other,
    })
}

pub fn cmd_gen_data(cfg: &TrainConfig) -> Result<Manifest> {
    cfg.validate()?;
    let manifest = make_dataset(&cfg.scene_spec(), cfg.splits, &cfg.data_dir)?;
    info!(
        "wrote {} train / {} val / {} test scenes to {}",
        cfg.splits.train,
        cfg.splits.val,
        cfg.splits.test,
        cfg.data_dir.display()
    );
    Ok(manifest)
}

/// Splits the train split into unpaired GAN sets: optical images from its
/// tail, SAR images from its head, never from the same scene.
pub fn gan_sets(train: &[StoredSample], cfg: &TrainConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if train.len() < 2 {
        return Err(Error::Config(format!("GAN pretraining needs >= 2 train scenes, found {}", train.len())));
    }
    let n_opt = cfg.gan_optical_count.min(train.len() / 2).max(1);
    let n_sar = (train.len() - n_opt).min(cfg.gan_sar_count);
    let sar = train[..n_sar].iter().map(StoredSample::sar_tensor).collect();
    let optical = train[train.len() - n_opt..].iter().map(StoredSample::optical_tensor).collect();
    Ok((sar, optical))
}

/// Pretrains the GAN, writing its checkpoint and a JSON line of losses per
/// iteration.
pub fn cmd_pretrain_gan(cfg: &TrainConfig) -> Result<GanPair> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    let train = data.load_split("train")?;
    let (sar, optical) = gan_sets(&train, cfg)?;
    info!("GAN pretraining on {} SAR / {} optical images, {} iterations", sar.len(), optical.len(), cfg.gan_iterations);
    let mut log = String::new();
    let pair = pretrain_gan(&sar, &optical, cfg.gan_iterations, cfg.seed, &cfg.gan, |r| {
        if r.iteration % 50 == 0 {
            info!("gan iter {} cycle {:.4} disc {:.4}/{:.4}", r.iteration, r.cycle_mean(), r.disc_x, r.disc_y);
        }
        log.push_str(&to_json_line(r));
    })?;
    checkpoint::save(&cfg.gan_checkpoint, &pair.named_tensors())?;
    write_file(&cfg.gan_log_path(), log.as_bytes())?;
    Ok(pair)
}

pub fn load_gan(cfg: &TrainConfig, path: &Path) -> Result<GanPair> {
    if !path.exists() {
        return Err(Error::Config(format!("GAN checkpoint {} not found (run pretrain-gan first)", path.display())));
    }
    let mut pair = GanPair::new(cfg.gan.clone(), cfg.seed)?;
    pair.load_tensors(&checkpoint::load(path)?)?;
    Ok(pair)
}

fn generator_skeleton(cfg: &TrainConfig) -> Result<Net<GeneratorNet>> {
    Ok(GanPair::new(cfg.gan.clone(), cfg.seed)?.g_xy)
}

/// Builds the configured network; with `use_gan` the generator comes from
/// the GAN checkpoint.
pub fn build_network(cfg: &TrainConfig) -> Result<FusionSegNet> {
    let generator = if cfg.ablation.use_gan { Some(load_gan(cfg, &cfg.gan_checkpoint)?.g_xy) } else { None };
    FusionSegNet::new(cfg.segnet.clone(), cfg.ablation, generator, cfg.seed)
}

/// Restores a network saved by [`cmd_train`]; the generator is read from the
/// same checkpoint.
pub fn load_network(cfg: &TrainConfig, path: &Path) -> Result<FusionSegNet> {
    let generator = if cfg.ablation.use_gan { Some(generator_skeleton(cfg)?) } else { None };
    let mut net = FusionSegNet::new(cfg.segnet.clone(), cfg.ablation, generator, cfg.seed)?;
    net.load_tensors(&checkpoint::load(path)?)?;
    Ok(net)
}

/// Network inputs and targets for one split, with the generator already
/// applied.
pub struct PreparedSplit {
    pub samples: Vec<StoredSample>,
    /// `[1,C,H,W]` stitched inputs.
    pub inputs: Vec<Tensor>,
    /// `[1,1,H,W]` binary targets.
    pub targets: Vec<Tensor>,
}

pub fn prepare_split(net: &FusionSegNet, samples: Vec<StoredSample>) -> Result<PreparedSplit> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in &samples {
        let n = s.size;
        inputs.push(net.stitch(&s.sar_tensor().reshape(&[1, 1, n, n])?)?);
        targets.push(Tensor::new(&[1, 1, n, n], s.mask.target())?);
    }
    Ok(PreparedSplit { samples, inputs, targets })
}

fn concat_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items[0].shape();
    let mut shape = first.to_vec();
    shape[0] = items.iter().map(|t| t.shape()[0]).sum();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Binary predictions (`1` where the logit is positive, i.e. `p > 0.5`) for
/// every sample, one `Vec<u8>` per sample.
pub fn predict_classes(net: &FusionSegNet, inputs: &[Tensor]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let batch = concat_batch(&chunk.iter().collect::<Vec<_>>())?;
        let logits = net.predict_stitched(&batch)?;
        let plane = logits.len() / chunk.len();
        for k in 0..chunk.len() {
            out.push(logits.data()[k * plane..(k + 1) * plane].iter().map(|&z| u8::from(z > 0.0)).collect());
        }
    }
    Ok(out)
}

pub fn evaluate(net: &FusionSegNet, split: &PreparedSplit) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(2);
    for (pred, s) in predict_classes(net, &split.inputs)?.iter().zip(&split.samples) {
        cm.accumulate(pred, &s.mask.classes())?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub dice: f64,
    pub bce: f64,
    pub composite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: LossTriple,
    pub val_fwiou: f64,
    pub val_iou_per_class: Vec<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_fwiou: f64,
    /// The network after the final epoch.
    pub net: FusionSegNet,
}

/// Trains the configured network, writing `metrics.jsonl`, `best.ckpt`
/// (highest validation FwIoU, earliest on ties) and `last.ckpt` under
/// `cfg.run_dir`.
pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    let mut net = build_network(cfg)?;
    let train = prepare_split(&net, data.load_split("train")?)?;
    let val = prepare_split(&net, data.load_split("val")?)?;
    if train.inputs.is_empty() || val.inputs.is_empty() {
        return Err(Error::Config("training needs nonempty train and val splits".into()));
    }
    mkdir(&cfg.run_dir)?;
    let metrics_path = cfg.metrics_path();
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let adamw = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(&net.store, adamw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best) = (0, f64::NEG_INFINITY);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = concat_batch(&chunk.iter().map(|&i| &train.inputs[i]).collect::<Vec<_>>())?;
            let y = concat_batch(&chunk.iter().map(|&i| &train.targets[i]).collect::<Vec<_>>())?;
            let mut s = Session::new(Mode::Train);
            let p = s.bind(&net.store, true);
            let xv = s.input(x);
            let logits = net.forward_stitched(&mut s, &p, xv)?;
            let loss = segmentation_loss(&mut s.graph, logits, &y)?;
            let values = [loss.dice, loss.bce, loss.composite].map(|v| s.graph.value(v).item());
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {batches}: loss (dice, bce, composite) = {values:?}"
                )));
            }
            let grads = s.backward(loss.composite)?;
            s.commit(&mut net.store, &p, Some(&grads));
            opt.step(&mut net.store, lr)?;
            for (acc, v) in sums.iter_mut().zip(values) {
                *acc += v;
            }
            batches += 1;
        }
        let cm = evaluate(&net, &val)?;
        let n = batches as f64;
        let record = MetricsRecord {
            epoch,
            train_loss: LossTriple { dice: sums[0] / n, bce: sums[1] / n, composite: sums[2] / n },
            val_fwiou: cm.fwiou()?,
            val_iou_per_class: cm.iou_per_class()?,
            lr,
            wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        info!(
            "epoch {epoch} lr {lr:.2e} loss {:.4} val FwIoU {:.4}",
            record.train_loss.composite, record.val_fwiou
        );
        metrics
            .write_all(to_json_line(&record).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        let tensors = net.named_tensors();
        if record.val_fwiou > best {
            best = record.val_fwiou;
            best_epoch = epoch;
            checkpoint::save(&cfg.best_checkpoint(), &tensors)?;
        }
        checkpoint::save(&cfg.last_checkpoint(), &tensors)?;
        records.push(record);
    }
    Ok(TrainOutcome { records, best_epoch, best_val_fwiou: best, net })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub fwiou: f64,
    pub fwiou_percent: f64,
    pub iou_per_class: Vec<f64>,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

pub fn eval_network(net: &FusionSegNet, cfg: &TrainConfig, split: &str) -> Result<(ConfusionMatrix, usize)> {
    let data = open_dataset(cfg)?;
    let prepared = prepare_split(net, data.load_split(split)?)?;
    let cm = evaluate(net, &prepared)?;
    Ok((cm, prepared.samples.len()))
}

pub fn cmd_eval(cfg: &TrainConfig, checkpoint_path: &Path, split: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let net = load_network(cfg, checkpoint_path)?;
    let (cm, samples) = eval_network(&net, cfg, split)?;
    let fwiou = cm.fwiou()?;
    Ok(EvalReport {
        split: split.to_string(),
        checkpoint: checkpoint_path.to_path_buf(),
        samples,
        fwiou,
        fwiou_percent: 100.0 * fwiou,
        iou_per_class: cm.iou_per_class()?,
        confusion: cm.rows(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_gan: bool,
    pub use_attention: bool,
    pub use_combine: bool,
    pub best_epoch: usize,
    pub val_fwiou: f64,
    pub test_fwiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, ab: AblationConfig) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| (r.use_gan, r.use_attention, r.use_combine) == (ab.use_gan, ab.use_attention, ab.use_combine))
    }

    /// Aligned text table with FwIoU as percentages.
    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "-" };
        let mut out = format!(
            "{:<18} {:>6} {:>9} {:>7} {:>10} {:>11}\n",
            "config", "GAN", "Attention", "Combine", "val FwIoU", "test FwIoU"
        );
        for r in &self.rows {
            out += &format!(
                "{:<18} {:>6} {:>9} {:>7} {:>10.3} {:>11.3}\n",
                r.name,
                mark(r.use_gan),
                mark(r.use_attention),
                mark(r.use_combine),
                100.0 * r.val_fwiou,
                100.0 * r.test_fwiou
            );
        }
        out
    }
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Trains and tests the four ablation configurations with identical seeds and
/// budgets. Runs land in `run_dir/ablate/<config>`; the report is written as
/// `ablation.json` and `ablation.txt` in `run_dir`.
pub fn cmd_ablate(cfg: &TrainConfig) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(4);
    for (name, ablation) in AblationConfig::TABLE {
        let run = TrainConfig { ablation, run_dir: cfg.run_dir.join("ablate").join(slug(name)), ..cfg.clone() };
        info!("ablation {name}");
        let outcome = cmd_train(&run)?;
        let best = load_network(&run, &run.best_checkpoint())?;
        let (cm, _) = eval_network(&best, &run, "test")?;
        rows.push(AblationRow {
            name: name.to_string(),
            use_gan: ablation.use_gan,
            use_attention: ablation.use_attention,
            use_combine: ablation.use_combine,
            best_epoch: outcome.best_epoch,
            val_fwiou: outcome.best_val_fwiou,
            test_fwiou: cm.fwiou()?,
        });
    }
    let report = AblationReport { rows };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&cfg.run_dir.join("ablation.json"), json.as_bytes())?;
    write_file(&cfg.run_dir.join("ablation.txt"), report.to_text().as_bytes())?;
    Ok(report)
}

/// Files written for one exported sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedMap {
    pub prediction: PathBuf,
    pub montage: PathBuf,
}

/// Writes `<name>_pred.pgm` ({0,255}) and `<name>_montage.pgm` for every
/// sample of `split`. The montage places the network input channels, the
/// ground truth and the prediction side by side.
pub fn cmd_export_maps(cfg: &TrainConfig, checkpoint_path: &Path, split: &str, out_dir: &Path) -> Result<Vec<ExportedMap>> {
    cfg.validate()?;
    let net = load_network(cfg, checkpoint_path)?;
    let data = open_dataset(cfg)?;
    let prepared = prepare_split(&net, data.load_split(split)?)?;
    let preds = predict_classes(&net, &prepared.inputs)?;
    mkdir(out_dir)?;
    let mut out = Vec::with_capacity(preds.len());
    for ((pred, sample), input) in preds.iter().zip(&prepared.samples).zip(&prepared.inputs) {
        let n = sample.size;
        let to_label = |c: &u8| if *c == 1 { FARM } else { WATER };
        let pred_img = GrayImage::new(n, n, pred.iter().map(to_label).collect())?;
        let mut panels: Vec<Vec<u8>> = input.data().chunks(n * n).map(|c| GrayImage::from_unit(n, n, c).map(|i| i.pixels)).collect::<Result<_>>()?;
        panels.push(sample.mask.pixels.clone());
        panels.push(pred_img.pixels.clone());
        let width = n * panels.len();
        let mut montage = vec![0u8; width * n];
        for (k, panel) in panels.iter().enumerate() {
            for r in 0..n {
                montage[r * width + k * n..r * width + (k + 1) * n].copy_from_slice(&panel[r * n..(r + 1) * n]);
            }
        }
        let files = ExportedMap {
            prediction: out_dir.join(format!("{}_pred.pgm", sample.name)),
            montage: out_dir.join(format!("{}_montage.pgm", sample.name)),
        };
        pred_img.save(&files.prediction)?;
        GrayImage::new(width, n, montage)?.save(&files.montage)?;
        out.push(files);
    }
    info!("exported {} maps to {}", out.len(), out_dir.display());
    Ok(out)
}


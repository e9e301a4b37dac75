//! CycleGAN-style unpaired SAR to optical translation.
//!
//! Two generators (`X -> Y`, `Y -> X`) and two patch discriminators are
//! trained alternately with least-squares adversarial losses and an L1 cycle
//! consistency term. Only the `X -> Y` generator is used downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Upsample, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{Conv, Init};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_cyc: f64,
    /// Channel width of the first generator stage.
    pub generator_channels: usize,
    pub discriminator_channels: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lr: 2e-4,
            batch_size: 1,
            lambda_cyc: 10.0,
            generator_channels: 8,
            discriminator_channels: 8,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl GanConfig {
    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Two stride-2 downsampling convolutions, two residual blocks, two
/// nearest-upsample + convolution stages and a sigmoid output.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    down: [Conv; 2],
    res: [(Conv, Conv); 2],
    up: [Conv; 2],
}

impl GeneratorNet {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let (c, c2) = (channels, 2 * channels);
        let down = [
            Conv::new(store, "down0", 1, c, 3, ConvGeom::new(2, 1, 1), true, Init::He, rng)?,
            Conv::new(store, "down1", c, c2, 3, ConvGeom::new(2, 1, 1), true, Init::He, rng)?,
        ];
        let mut block = |i: usize, rng: &mut _| -> Result<(Conv, Conv)> {
            Ok((
                Conv::new(store, &format!("res{i}.a"), c2, c2, 3, ConvGeom::same(3, 1), true, Init::He, rng)?,
                Conv::new(store, &format!("res{i}.b"), c2, c2, 3, ConvGeom::same(3, 1), true, Init::Fan, rng)?,
            ))
        };
        let res = [block(0, rng)?, block(1, rng)?];
        let up = [
            Conv::new(store, "up0", c2, c, 3, ConvGeom::same(3, 1), true, Init::He, rng)?,
            Conv::new(store, "up1", c, 1, 3, ConvGeom::same(3, 1), true, Init::Zeros, rng)?,
        ];
        Ok(GeneratorNet { down, res, up })
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let [_, c, h, w] = s.graph.value(x).dims4()?;
        if c != 1 {
            return Err(dim_err!("generator expects single-channel images, got {c} channels"));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err!("generator needs spatial extents divisible by 4, got {h}x{w}"));
        }
        let mut y = x;
        for conv in &self.down {
            y = conv.forward(s, p, y)?;
            y = s.graph.relu(y);
        }
        for (a, b) in &self.res {
            let r = a.forward(s, p, y)?;
            let r = s.graph.relu(r);
            let r = b.forward(s, p, r)?;
            y = s.graph.add(y, r)?;
        }
        y = s.graph.upsample(y, 2, Upsample::Nearest)?;
        y = self.up[0].forward(s, p, y)?;
        y = s.graph.relu(y);
        y = s.graph.upsample(y, 2, Upsample::Nearest)?;
        y = self.up[1].forward(s, p, y)?;
        Ok(s.graph.sigmoid(y))
    }
}

/// Strided patch classifier with sigmoid scores.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    convs: [Conv; 3],
}

impl DiscriminatorNet {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let (c, c2) = (channels, 2 * channels);
        Ok(DiscriminatorNet {
            convs: [
                Conv::new(store, "conv0", 1, c, 3, ConvGeom::new(2, 1, 1), true, Init::He, rng)?,
                Conv::new(store, "conv1", c, c2, 3, ConvGeom::new(2, 1, 1), true, Init::He, rng)?,
                Conv::new(store, "conv2", c2, 1, 3, ConvGeom::same(3, 1), true, Init::Fan, rng)?,
            ],
        })
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let mut y = x;
        for conv in &self.convs[..2] {
            y = conv.forward(s, p, y)?;
            y = s.graph.leaky_relu(y, 0.2);
        }
        y = self.convs[2].forward(s, p, y)?;
        Ok(s.graph.sigmoid(y))
    }
}

/// A network together with the tensors it reads.
#[derive(Clone, Debug)]
pub struct Net<N> {
    pub net: N,
    pub store: ParamStore,
}

impl Net<GeneratorNet> {
    /// Inference on a `[B,1,H,W]` batch; no gradient is recorded.
    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("generator input must lie in [0,1], found {v}")));
        }
        let mut s = Session::new(Mode::Eval);
        let p = s.bind(&self.store, false);
        let xv = s.input(x.clone());
        let y = self.net.forward(&mut s, &p, xv)?;
        Ok(s.graph.value(y).clone())
    }
}

/// `loss_D = (mean((d_real-1)^2) + mean(d_fake^2)) / 2` and
/// `loss_G = mean((d_fake-1)^2)`.
pub fn adversarial_losses(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let real_gap = g.add_scalar(d_real, -1.0);
    let real_sq = g.mul(real_gap, real_gap)?;
    let real_term = g.mean(real_sq);
    let fake_sq = g.mul(d_fake, d_fake)?;
    let fake_term = g.mean(fake_sq);
    let d_sum = g.add(real_term, fake_term)?;
    let loss_d = g.scale(d_sum, 0.5);
    let loss_g = generator_adversarial_loss(g, d_fake)?;
    Ok((loss_d, loss_g))
}

pub fn generator_adversarial_loss(g: &mut Graph, d_fake: Var) -> Result<Var> {
    let gap = g.add_scalar(d_fake, -1.0);
    let sq = g.mul(gap, gap)?;
    Ok(g.mean(sq))
}

/// `lambda * mean|x - x_rec|`.
pub fn cycle_loss(g: &mut Graph, x: Var, x_rec: Var, lambda: f64) -> Result<Var> {
    let d = g.sub(x, x_rec)?;
    let a = g.abs(d);
    let m = g.mean(a);
    Ok(g.scale(m, lambda))
}

/// Loss components of one alternating update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub iteration: usize,
    /// `D_Y(G_XY(x))` towards real.
    pub adv_xy: f64,
    /// `D_X(G_YX(y))` towards real.
    pub adv_yx: f64,
    pub cycle_x: f64,
    pub cycle_y: f64,
    pub disc_x: f64,
    pub disc_y: f64,
}

impl GanLosses {
    pub fn cycle_mean(&self) -> f64 {
        0.5 * (self.cycle_x + self.cycle_y)
    }
}

pub const CHECKPOINT_PREFIXES: [&str; 4] = ["g_xy.", "g_yx.", "d_x.", "d_y."];

/// Generators, discriminators and their optimizers.
#[derive(Clone, Debug)]
pub struct GanPair {
    pub g_xy: Net<GeneratorNet>,
    pub g_yx: Net<GeneratorNet>,
    pub d_x: Net<DiscriminatorNet>,
    pub d_y: Net<DiscriminatorNet>,
    pub config: GanConfig,
    opt: [AdamW; 4],
}

fn generator(cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Net<GeneratorNet>> {
    let mut store = ParamStore::new();
    let net = GeneratorNet::new(&mut store, cfg.generator_channels, rng)?;
    Ok(Net { net, store })
}

fn discriminator(cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Net<DiscriminatorNet>> {
    let mut store = ParamStore::new();
    let net = DiscriminatorNet::new(&mut store, cfg.discriminator_channels, rng)?;
    Ok(Net { net, store })
}

impl GanPair {
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        if !(config.lambda_cyc > 0.0) {
            return Err(Error::Config(format!("lambda_cyc must be positive, got {}", config.lambda_cyc)));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("GAN batch size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g_xy = generator(&config, &mut rng)?;
        let g_yx = generator(&config, &mut rng)?;
        let d_x = discriminator(&config, &mut rng)?;
        let d_y = discriminator(&config, &mut rng)?;
        let a = config.adamw();
        let opt = [
            AdamW::new(&g_xy.store, a)?,
            AdamW::new(&g_yx.store, a)?,
            AdamW::new(&d_x.store, a)?,
            AdamW::new(&d_y.store, a)?,
        ];
        Ok(GanPair { g_xy, g_yx, d_x, d_y, config, opt })
    }

    fn stores(&self) -> [&ParamStore; 4] {
        [&self.g_xy.store, &self.g_yx.store, &self.d_x.store, &self.d_y.store]
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.stores().iter().zip(CHECKPOINT_PREFIXES).flat_map(|(s, p)| s.named_tensors(p)).collect()
    }

    /// Restores parameters written by [`GanPair::named_tensors`].
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let [a, b, c, d] = CHECKPOINT_PREFIXES;
        self.g_xy.store.load_named(tensors, a)?;
        self.g_yx.store.load_named(tensors, b)?;
        self.d_x.store.load_named(tensors, c)?;
        self.d_y.store.load_named(tensors, d)?;
        Ok(())
    }

    /// One alternating update: both generators against frozen
    /// discriminators, then both discriminators against the (detached)
    /// fakes of that generator pass.
    pub fn train_step(&mut self, batch_x: &Tensor, batch_y: &Tensor, lr: f64, iteration: usize) -> Result<GanLosses> {
        let (mut rec, fakes) = self.generator_step(batch_x, batch_y, lr, iteration)?;
        let (disc_x, disc_y) = self.discriminator_step(batch_x, batch_y, &fakes, lr)?;
        rec.disc_x = disc_x;
        rec.disc_y = disc_y;
        let all = [rec.adv_xy, rec.adv_yx, rec.cycle_x, rec.cycle_y, rec.disc_x, rec.disc_y];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("GAN iteration {iteration} produced non-finite losses {all:?}")));
        }
        Ok(rec)
    }

    /// Updates both generators; discriminators are read but not changed.
    /// Returns the losses (discriminator fields zero) and the fakes
    /// `(G_XY(x), G_YX(y))`.
    pub fn generator_step(
        &mut self,
        batch_x: &Tensor,
        batch_y: &Tensor,
        lr: f64,
        iteration: usize,
    ) -> Result<(GanLosses, (Tensor, Tensor))> {
        if batch_x.dims4()?[0] == 0 || batch_y.dims4()?[0] == 0 {
            return Err(Error::Contract("GAN batches must be nonempty".into()));
        }
        let lambda = self.config.lambda_cyc;
        let mut s = Session::new(Mode::Train);
        let gxy = s.bind(&self.g_xy.store, true);
        let gyx = s.bind(&self.g_yx.store, true);
        let dx = s.bind(&self.d_x.store, false);
        let dy = s.bind(&self.d_y.store, false);
        let x = s.input(batch_x.clone());
        let y = s.input(batch_y.clone());
        let fake_y = self.g_xy.net.forward(&mut s, &gxy, x)?;
        let rec_x = self.g_yx.net.forward(&mut s, &gyx, fake_y)?;
        let fake_x = self.g_yx.net.forward(&mut s, &gyx, y)?;
        let rec_y = self.g_xy.net.forward(&mut s, &gxy, fake_x)?;
        let score_fake_y = self.d_y.net.forward(&mut s, &dy, fake_y)?;
        let score_fake_x = self.d_x.net.forward(&mut s, &dx, fake_x)?;
        let g = &mut s.graph;
        let adv_xy = generator_adversarial_loss(g, score_fake_y)?;
        let adv_yx = generator_adversarial_loss(g, score_fake_x)?;
        let cyc_x = cycle_loss(g, x, rec_x, lambda)?;
        let cyc_y = cycle_loss(g, y, rec_y, lambda)?;
        let adv = g.add(adv_xy, adv_yx)?;
        let cyc = g.add(cyc_x, cyc_y)?;
        let total = g.add(adv, cyc)?;
        let grads = s.backward(total)?;
        s.commit(&mut self.g_xy.store, &gxy, Some(&grads));
        s.commit(&mut self.g_yx.store, &gyx, Some(&grads));
        let value = |v: Var| s.graph.value(v).item();
        let rec = GanLosses {
            iteration,
            adv_xy: value(adv_xy),
            adv_yx: value(adv_yx),
            cycle_x: value(cyc_x),
            cycle_y: value(cyc_y),
            disc_x: 0.0,
            disc_y: 0.0,
        };
        let fakes = (s.graph.value(fake_y).clone(), s.graph.value(fake_x).clone());
        self.opt[0].step(&mut self.g_xy.store, lr)?;
        self.opt[1].step(&mut self.g_yx.store, lr)?;
        Ok((rec, fakes))
    }

    /// Updates both discriminators on real batches and precomputed fakes
    /// `(fake_y, fake_x)`. Returns `(loss_D_X, loss_D_Y)`.
    pub fn discriminator_step(
        &mut self,
        batch_x: &Tensor,
        batch_y: &Tensor,
        fakes: &(Tensor, Tensor),
        lr: f64,
    ) -> Result<(f64, f64)> {
        let mut s = Session::new(Mode::Train);
        let dx = s.bind(&self.d_x.store, true);
        let dy = s.bind(&self.d_y.store, true);
        let x = s.input(batch_x.clone());
        let y = s.input(batch_y.clone());
        let fy = s.input(fakes.0.clone());
        let fx = s.input(fakes.1.clone());
        let real_x = self.d_x.net.forward(&mut s, &dx, x)?;
        let fake_x = self.d_x.net.forward(&mut s, &dx, fx)?;
        let real_y = self.d_y.net.forward(&mut s, &dy, y)?;
        let fake_y = self.d_y.net.forward(&mut s, &dy, fy)?;
        let (disc_x, _) = adversarial_losses(&mut s.graph, real_x, fake_x)?;
        let (disc_y, _) = adversarial_losses(&mut s.graph, real_y, fake_y)?;
        let total = s.graph.add(disc_x, disc_y)?;
        let grads = s.backward(total)?;
        s.commit(&mut self.d_x.store, &dx, Some(&grads));
        s.commit(&mut self.d_y.store, &dy, Some(&grads));
        let out = (s.graph.value(disc_x).item(), s.graph.value(disc_y).item());
        self.opt[2].step(&mut self.d_x.store, lr)?;
        self.opt[3].step(&mut self.d_y.store, lr)?;
        Ok(out)
    }
}

fn sample_batch(set: &[Tensor], batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let picks: Vec<&Tensor> = (0..batch).map(|_| &set[rng.random_range(0..set.len())]).collect();
    Tensor::stack(&picks)
}

/// Trains a fresh [`GanPair`] for `iterations` steps, drawing each side's
/// batch independently with replacement. `x_set` and `y_set` hold `[1,H,W]`
/// images and may differ in size. `on_step` sees every loss record.
pub fn pretrain_gan(
    x_set: &[Tensor],
    y_set: &[Tensor],
    iterations: usize,
    seed: u64,
    config: &GanConfig,
    mut on_step: impl FnMut(&GanLosses),
) -> Result<GanPair> {
    if x_set.is_empty() || y_set.is_empty() {
        return Err(Error::Config("GAN pretraining needs nonempty SAR and optical sets".into()));
    }
    let mut pair = GanPair::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    for it in 0..iterations {
        let bx = sample_batch(x_set, config.batch_size, &mut rng)?;
        let by = sample_batch(y_set, config.batch_size, &mut rng)?;
        let rec = pair.train_step(&bx, &by, config.lr, it)?;
        on_step(&rec);
    }
    Ok(pair)
}

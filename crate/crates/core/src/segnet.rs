//! The fusion segmentation network: stitch, attention stage, compound-scaled
//! encoder, ASPP and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStage;
use crate::autodiff::{ConvGeom, Upsample, Var};
use crate::error::{dim_err, Error, Result};
use crate::gan::{GeneratorNet, Net};
use crate::layers::{Conv, ConvBnRelu, Init};
use crate::params::{Binding, Mode, ParamStore, Session};
use crate::tensor::Tensor;

/// Which optional parts of the pipeline are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub use_gan: bool,
    pub use_attention: bool,
    /// Stitch the generated image with the SAR input instead of replacing it.
    pub use_combine: bool,
}

impl AblationConfig {
    pub const BODY: Self = AblationConfig { use_gan: false, use_attention: false, use_combine: false };
    pub const GAN: Self = AblationConfig { use_gan: true, use_attention: false, use_combine: false };
    pub const GAN_ATTENTION: Self = AblationConfig { use_gan: true, use_attention: true, use_combine: false };
    pub const FULL: Self = AblationConfig { use_gan: true, use_attention: true, use_combine: true };

    /// The four ablation rows in report order.
    pub const TABLE: [(&'static str, Self); 4] = [
        ("Body", Self::BODY),
        ("+GAN", Self::GAN),
        ("+GAN+Att", Self::GAN_ATTENTION),
        ("+GAN+Att+Combine", Self::FULL),
    ];

    pub fn validate(&self) -> Result<()> {
        if self.use_combine && !self.use_gan {
            return Err(Error::Config("use_combine requires use_gan".into()));
        }
        Ok(())
    }

    /// Channels of the stitched input.
    pub fn input_channels(&self) -> usize {
        if self.use_combine {
            2
        } else {
            1
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Resolution scaling: inputs are upsampled (nearest) by this factor
    /// before the entry stage and the logits average-pooled back, so the
    /// network works at `resolution_mult` times the image resolution.
    pub resolution_mult: usize,
    /// Per-stage channels at `width_mult = 1`; four stages, the last three
    /// of which each halve the resolution again after the first.
    pub base_channels: [usize; 4],
    pub base_repeats: usize,
    /// Channels fed to the encoder, produced by the attention stage or a
    /// pointwise lift.
    pub encoder_in_channels: usize,
    pub attention_units: usize,
    pub attention_dim: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub decoder_low_channels: usize,
    pub decoder_channels: usize,
    pub upsample: Upsample,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            width_mult: 1.0,
            depth_mult: 1.0,
            resolution_mult: 2,
            base_channels: [8, 16, 24, 32],
            base_repeats: 1,
            encoder_in_channels: 3,
            attention_units: 16,
            attention_dim: 8,
            aspp_rates: vec![1, 2, 4],
            aspp_channels: 16,
            decoder_low_channels: 8,
            decoder_channels: 16,
            upsample: Upsample::Bilinear,
        }
    }
}

impl SegNetConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        self.base_channels.map(|c| ((c as f64 * self.width_mult).round() as usize).max(1))
    }

    pub fn stage_repeats(&self) -> usize {
        ((self.base_repeats as f64 * self.depth_mult).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.depth_mult > 0.0) {
            return Err(Error::Config(format!(
                "width_mult and depth_mult must be positive, got {} and {}",
                self.width_mult, self.depth_mult
            )));
        }
        if self.resolution_mult == 0 {
            return Err(Error::Config("resolution_mult must be >= 1".into()));
        }
        if self.aspp_rates.is_empty() {
            return Err(Error::Config("aspp_rates must be nonempty".into()));
        }
        if self.aspp_rates.contains(&0) {
            return Err(Error::Config("aspp rates must be >= 1".into()));
        }
        let widths = [
            self.base_repeats,
            self.encoder_in_channels,
            self.attention_units,
            self.attention_dim,
            self.aspp_channels,
            self.decoder_low_channels,
            self.decoder_channels,
        ];
        if widths.contains(&0) || self.base_channels.contains(&0) {
            return Err(Error::Config("layer widths and repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// One stage of the encoder: the first block downsamples by 2.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<ConvBnRelu>,
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub pointwise: ConvBnRelu,
    pub atrous: Vec<ConvBnRelu>,
    pub pooled: Conv,
    pub fuse: ConvBnRelu,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rates: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("aspp needs at least one rate".into()));
        }
        let pointwise = ConvBnRelu::new(store, &format!("{name}.b0"), cin, cout, 1, ConvGeom::new(1, 1, 0), rng)?;
        let atrous = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| ConvBnRelu::new(store, &format!("{name}.b{}", i + 1), cin, cout, 3, ConvGeom::same(3, r), rng))
            .collect::<Result<Vec<_>>>()?;
        let pooled = Conv::pointwise(store, &format!("{name}.pool"), cin, cout, true, Init::He, rng)?;
        let branches = rates.len() + 2;
        let fuse = ConvBnRelu::new(store, &format!("{name}.fuse"), branches * cout, cout, 1, ConvGeom::new(1, 1, 0), rng)?;
        Ok(Aspp { pointwise, atrous, pooled, fuse })
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, f: Var) -> Result<Var> {
        let [_, _, h, w] = s.graph.value(f).dims4()?;
        let mut out = self.pointwise.forward(s, p, f)?;
        for branch in &self.atrous {
            let y = branch.forward(s, p, f)?;
            out = s.graph.concat_channels(out, y)?;
        }
        let pooled = s.graph.global_avg_pool(f)?;
        let pooled = self.pooled.forward(s, p, pooled)?;
        let pooled = s.graph.relu(pooled);
        let pooled = s.graph.expand_spatial(pooled, h, w)?;
        out = s.graph.concat_channels(out, pooled)?;
        self.fuse.forward(s, p, out)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub reduce_low: ConvBnRelu,
    pub refine: [ConvBnRelu; 2],
    pub head: Conv,
    pub upsample: Upsample,
}

/// Encoder features at strides 4 and 16.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub low: Var,
    pub high: Var,
}

/// How the stitched input reaches the encoder.
#[derive(Clone, Debug)]
pub enum Entry {
    Attention(AttentionStage),
    Lift(Conv),
}

#[derive(Clone, Debug)]
pub struct FusionSegNet {
    pub config: SegNetConfig,
    pub ablation: AblationConfig,
    /// Frozen; never bound with gradient tracking.
    pub generator: Option<Net<GeneratorNet>>,
    pub store: ParamStore,
    pub entry: Entry,
    pub encoder: Vec<EncoderStage>,
    pub aspp: Aspp,
    pub decoder: Decoder,
}

pub const GENERATOR_PREFIX: &str = "generator.";

impl FusionSegNet {
    pub fn new(config: SegNetConfig, ablation: AblationConfig, generator: Option<Net<GeneratorNet>>, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        if ablation.use_gan && generator.is_none() {
            return Err(Error::Config("use_gan is set but no generator is loaded".into()));
        }
        let generator = if ablation.use_gan { generator } else { None };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cin = ablation.input_channels();
        let cenc = config.encoder_in_channels;
        let entry = if ablation.use_attention {
            Entry::Attention(AttentionStage::new(
                &mut store,
                "attention",
                cin,
                config.attention_units,
                config.attention_dim,
                cenc,
                &mut rng,
            )?)
        } else {
            Entry::Lift(Conv::pointwise(&mut store, "lift", cin, cenc, true, Init::Fan, &mut rng)?)
        };

        let widths = config.stage_channels();
        let repeats = config.stage_repeats();
        let mut encoder = Vec::with_capacity(4);
        let mut prev = cenc;
        for (i, &c) in widths.iter().enumerate() {
            let blocks = (0..repeats)
                .map(|j| {
                    let (input, stride) = if j == 0 { (prev, 2) } else { (c, 1) };
                    let geom = ConvGeom::new(stride, 1, 1);
                    ConvBnRelu::new(&mut store, &format!("encoder.{i}.{j}"), input, c, 3, geom, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            encoder.push(EncoderStage { blocks });
            prev = c;
        }

        let aspp = Aspp::new(&mut store, "aspp", widths[3], config.aspp_channels, &config.aspp_rates, &mut rng)?;
        let (lo, dc) = (config.decoder_low_channels, config.decoder_channels);
        let same = ConvGeom::same(3, 1);
        let decoder = Decoder {
            reduce_low: ConvBnRelu::new(&mut store, "decoder.low", widths[1], lo, 1, ConvGeom::new(1, 1, 0), &mut rng)?,
            refine: [
                ConvBnRelu::new(&mut store, "decoder.refine0", config.aspp_channels + lo, dc, 3, same, &mut rng)?,
                ConvBnRelu::new(&mut store, "decoder.refine1", dc, dc, 3, same, &mut rng)?,
            ],
            head: Conv::pointwise(&mut store, "decoder.head", dc, 1, true, Init::Zeros, &mut rng)?,
            upsample: config.upsample,
        };
        Ok(FusionSegNet { config, ablation, generator, store, entry, encoder, aspp, decoder })
    }

    /// Builds the network input from a `[B,1,H,W]` SAR batch. The generator
    /// runs in inference mode, so the result carries no gradient path.
    pub fn stitch(&self, sar: &Tensor) -> Result<Tensor> {
        let [_, c, _, _] = sar.dims4()?;
        if c != 1 {
            return Err(dim_err!("SAR input must have one channel, got {c}"));
        }
        if !self.ablation.use_gan {
            return Ok(sar.clone());
        }
        let generator = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("use_gan is set but no generator is loaded".into()))?;
        let generated = generator.generate(sar)?;
        if !self.ablation.use_combine {
            return Ok(generated);
        }
        concat_channels(sar, &generated)
    }

    pub fn encode(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Features> {
        let [_, _, h, w] = s.graph.value(x).dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(dim_err!("encoder input extents must be divisible by 16, got {h}x{w}"));
        }
        let mut y = x;
        let mut low = None;
        for (i, stage) in self.encoder.iter().enumerate() {
            for block in &stage.blocks {
                y = block.forward(s, p, y)?;
            }
            if i == 1 {
                low = Some(y);
            }
        }
        Ok(Features { low: low.expect("encoder has four stages"), high: y })
    }

    pub fn decode(&self, s: &mut Session, p: &Binding, high: Var, low: Var, h: usize, w: usize) -> Result<Var> {
        let d = &self.decoder;
        let [_, _, lh, lw] = s.graph.value(low).dims4()?;
        let [_, _, hh, hw] = s.graph.value(high).dims4()?;
        if lh != 4 * hh || lw != 4 * hw || h != 4 * lh || w != 4 * lw {
            return Err(dim_err!("decoder got high {hh}x{hw}, low {lh}x{lw} for output {h}x{w}"));
        }
        let up = s.graph.upsample(high, 4, d.upsample)?;
        let low = d.reduce_low.forward(s, p, low)?;
        let mut y = s.graph.concat_channels(up, low)?;
        for block in &d.refine {
            y = block.forward(s, p, y)?;
        }
        let y = d.head.forward(s, p, y)?;
        s.graph.upsample(y, 4, d.upsample)
    }

    /// Logits `[B,1,H,W]` for an already stitched input.
    pub fn forward_stitched(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let [_, c, h, w] = s.graph.value(x).dims4()?;
        if c != self.ablation.input_channels() {
            return Err(dim_err!("expected {} input channels, got {c}", self.ablation.input_channels()));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(dim_err!("input extents must be divisible by 16, got {h}x{w}"));
        }
        let r = self.config.resolution_mult;
        let x = if r > 1 { s.graph.upsample(x, r, Upsample::Nearest)? } else { x };
        let x = match &self.entry {
            Entry::Attention(stage) => stage.forward(s, p, x)?,
            Entry::Lift(conv) => conv.forward(s, p, x)?,
        };
        let f = self.encode(s, p, x)?;
        let high = self.aspp.forward(s, p, f.high)?;
        let y = self.decode(s, p, high, f.low, h * r, w * r)?;
        if r > 1 {
            s.graph.avg_pool(y, r)
        } else {
            Ok(y)
        }
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, sar: &Tensor) -> Result<Var> {
        let x = self.stitch(sar)?;
        let x = s.input(x);
        self.forward_stitched(s, p, x)
    }

    /// Inference-mode logits for a stitched batch.
    pub fn predict_stitched(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(Mode::Eval);
        let p = s.bind(&self.store, false);
        let xv = s.input(x.clone());
        let y = self.forward_stitched(&mut s, &p, xv)?;
        Ok(s.graph.value(y).clone())
    }

    pub fn predict(&self, sar: &Tensor) -> Result<Tensor> {
        self.predict_stitched(&self.stitch(sar)?)
    }

    /// Segmentation parameters, then the generator under [`GENERATOR_PREFIX`].
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.store.named_tensors("");
        if let Some(g) = &self.generator {
            out.extend(g.store.named_tensors(GENERATOR_PREFIX));
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        self.store.load_named(tensors, "")?;
        if let Some(g) = &mut self.generator {
            g.store.load_named(tensors, GENERATOR_PREFIX)?;
        }
        let expected = self.store.len() + self.generator.as_ref().map_or(0, |g| g.store.len());
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network expects {expected}",
                tensors.len()
            )));
        }
        Ok(())
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(dim_err!("cannot stitch {:?} with {:?}", a.shape(), b.shape()));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

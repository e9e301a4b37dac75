//! Synthetic mariculture-farm scenes.
//!
//! A scene is a binary mask of rectangular farm grids (255) on water (0),
//! rendered twice: a clean "optical" image with mild additive Gaussian noise
//! and a "SAR" image whose two-level reflectivity is multiplied by Gamma
//! speckle with `L` looks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::Tensor;

pub const FARM: u8 = 255;
pub const WATER: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of farm grids per scene.
    pub farm_count_range: (usize, usize),
    /// Inclusive range of cell side lengths in pixels.
    pub farm_cell_size_range: (usize, usize),
    /// Inclusive range of cells along each grid axis.
    pub farm_grid_cells_range: (usize, usize),
    /// Water strip between neighbouring cells, in pixels.
    pub grid_gap: usize,
    pub optical_foreground: f64,
    pub optical_background: f64,
    pub optical_noise_sigma: f64,
    pub sar_foreground: f64,
    pub sar_background: f64,
    pub speckle_looks: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            farm_count_range: (1, 3),
            farm_cell_size_range: (6, 12),
            farm_grid_cells_range: (1, 3),
            grid_gap: 3,
            optical_foreground: 0.8,
            optical_background: 0.2,
            optical_noise_sigma: 0.04,
            sar_foreground: 0.55,
            sar_background: 0.15,
            speckle_looks: 4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return cfg(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        let (cmin, cmax) = self.farm_cell_size_range;
        if cmin == 0 || cmin > cmax {
            return cfg(format!("invalid farm_cell_size_range {:?}", self.farm_cell_size_range));
        }
        if cmax >= self.image_size {
            return cfg(format!("farm cell size {cmax} must be smaller than the image size {}", self.image_size));
        }
        if self.farm_count_range.0 > self.farm_count_range.1 {
            return cfg(format!("invalid farm_count_range {:?}", self.farm_count_range));
        }
        let (gmin, gmax) = self.farm_grid_cells_range;
        if gmin == 0 || gmin > gmax {
            return cfg(format!("invalid farm_grid_cells_range {:?}", self.farm_grid_cells_range));
        }
        for (name, v) in [
            ("optical_foreground", self.optical_foreground),
            ("optical_background", self.optical_background),
            ("sar_foreground", self.sar_foreground),
            ("sar_background", self.sar_background),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return cfg(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if !(self.optical_noise_sigma >= 0.0) {
            return cfg("optical_noise_sigma must be nonnegative".into());
        }
        if self.speckle_looks == 0 {
            return cfg("speckle_looks must be >= 1".into());
        }
        Ok(())
    }
}

/// Row-major `{0,255}` label mask of a square scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Mask {
    /// Class ids `{0,1}`.
    pub fn classes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| u8::from(p == FARM)).collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| if p == FARM { 1.0 } else { 0.0 }).collect()
    }
}

pub fn gen_label_mask(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Mask> {
    spec.validate()?;
    let n = spec.image_size;
    let mut pixels = vec![WATER; n * n];
    let farms = rng.random_range(spec.farm_count_range.0..=spec.farm_count_range.1);
    let (cmin, cmax) = spec.farm_cell_size_range;
    let (gmin, gmax) = spec.farm_grid_cells_range;
    for _ in 0..farms {
        let cell_w = rng.random_range(cmin..=cmax);
        let cell_h = rng.random_range(cmin..=cmax);
        let cols = rng.random_range(gmin..=gmax);
        let rows = rng.random_range(gmin..=gmax);
        let x0 = rng.random_range(0..=n - cell_w);
        let y0 = rng.random_range(0..=n - cell_h);
        for r in 0..rows {
            for c in 0..cols {
                let cy = y0 + r * (cell_h + spec.grid_gap);
                let cx = x0 + c * (cell_w + spec.grid_gap);
                for y in cy..(cy + cell_h).min(n) {
                    for x in cx..(cx + cell_w).min(n) {
                        pixels[y * n + x] = FARM;
                    }
                }
            }
        }
    }
    Ok(Mask { size: n, pixels })
}

pub fn render_optical(mask: &Mask, spec: &SceneSpec, rng: &mut impl Rng) -> Vec<f64> {
    mask.pixels
        .iter()
        .map(|&p| {
            let level = if p == FARM { spec.optical_foreground } else { spec.optical_background };
            let noise: f64 = if spec.optical_noise_sigma > 0.0 {
                spec.optical_noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (level + noise).clamp(0.0, 1.0)
        })
        .collect()
}

/// Gamma(L, 1/L) speckle factor as the mean of `L` unit exponentials.
pub fn speckle_factor(looks: u32, rng: &mut impl Rng) -> f64 {
    let total: f64 = (0..looks).map(|_| -> f64 { rng.sample(Exp1) }).sum();
    total / looks as f64
}

pub fn render_sar(mask: &Mask, spec: &SceneSpec, rng: &mut impl Rng) -> Vec<f64> {
    mask.pixels
        .iter()
        .map(|&p| {
            let level = if p == FARM { spec.sar_foreground } else { spec.sar_background };
            (level * speckle_factor(spec.speckle_looks, rng)).clamp(0.0, 1.0)
        })
        .collect()
}

/// One rendered scene with continuous intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    pub sar: Vec<f64>,
    pub optical: Vec<f64>,
    pub mask: Mask,
}

impl Sample {
    pub fn generate(spec: &SceneSpec, index: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index);
        let mask = gen_label_mask(spec, &mut rng)?;
        let optical = render_optical(&mask, spec, &mut rng);
        let sar = render_sar(&mask, spec, &mut rng);
        Ok(Sample { size: spec.image_size, sar, optical, mask })
    }

    /// `[1,H,W]` SAR tensor.
    pub fn sar_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.sar.clone()).expect("square image")
    }

    pub fn optical_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.optical.clone()).expect("square image")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub sar: String,
    pub optical: String,
    pub mask: String,
}

/// Split name to relative sample paths.
pub type Manifest = BTreeMap<String, Vec<SampleFiles>>;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train: 200, val: 40, test: 40 }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Renders and persists `train + val + test` scenes under `dir`, writing the
/// three PGMs per scene and [`MANIFEST_FILE`]. Scene `i` (counted across
/// splits) is seeded with `spec.seed ^ i`.
pub fn make_dataset(spec: &SceneSpec, counts: SplitCounts, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    mkdir(dir)?;
    let mut manifest = Manifest::new();
    let mut index = 0u64;
    for (split, n) in SPLITS.into_iter().zip([counts.train, counts.val, counts.test]) {
        mkdir(&dir.join(split))?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let s = Sample::generate(spec, index)?;
            let stem = format!("{split}/{index:05}");
            let files = SampleFiles {
                sar: format!("{stem}_sar.pgm"),
                optical: format!("{stem}_optical.pgm"),
                mask: format!("{stem}_mask.pgm"),
            };
            let size = s.size;
            GrayImage::from_unit(size, size, &s.sar)?.save(&dir.join(&files.sar))?;
            GrayImage::from_unit(size, size, &s.optical)?.save(&dir.join(&files.optical))?;
            GrayImage::new(size, size, s.mask.pixels.clone())?.save(&dir.join(&files.mask))?;
            entries.push(files);
            index += 1;
        }
        manifest.insert(split.to_string(), entries);
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A scene read back from disk (intensities quantized to 1/255).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub name: String,
    pub size: usize,
    pub sar: Vec<f64>,
    pub optical: Vec<f64>,
    pub mask: Mask,
}

impl StoredSample {
    pub fn sar_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.sar.clone()).expect("square image")
    }

    pub fn optical_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.optical.clone()).expect("square image")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn split_len(&self, split: &str) -> usize {
        self.manifest.get(split).map_or(0, Vec::len)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<StoredSample>> {
        let entries = self
            .manifest
            .get(split)
            .ok_or_else(|| Error::Config(format!("dataset has no split named {split}")))?;
        entries.iter().map(|f| self.load_sample(f)).collect()
    }

    fn load_sample(&self, f: &SampleFiles) -> Result<StoredSample> {
        let sar = GrayImage::load(&self.root.join(&f.sar))?;
        let optical = GrayImage::load(&self.root.join(&f.optical))?;
        let mask = GrayImage::load(&self.root.join(&f.mask))?;
        let square = sar.width == sar.height;
        let same = |i: &GrayImage| i.width == sar.width && i.height == sar.height;
        if !square || !same(&optical) || !same(&mask) {
            return Err(Error::Format {
                path: self.root.join(&f.sar),
                msg: "sample images must be square and share extents".into(),
            });
        }
        if mask.pixels.iter().any(|&p| p != FARM && p != WATER) {
            return Err(Error::Format { path: self.root.join(&f.mask), msg: "mask must be two-valued {0,255}".into() });
        }
        let name = Path::new(&f.sar)
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches("_sar").to_string())
            .unwrap_or_default();
        Ok(StoredSample {
            name,
            size: sar.width,
            sar: sar.to_unit(),
            optical: optical.to_unit(),
            mask: Mask { size: mask.width, pixels: mask.pixels },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_farm_range_gives_empty_mask() {
        let spec = SceneSpec { farm_count_range: (0, 0), ..Default::default() };
        let m = gen_label_mask(&spec, &mut rng(1)).unwrap();
        assert!(m.pixels.iter().all(|&p| p == WATER));
    }

    #[test]
    fn masks_are_two_valued_and_deterministic() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let a = gen_label_mask(&spec, &mut rng(seed)).unwrap();
            assert!(a.pixels.iter().all(|&p| p == FARM || p == WATER));
            assert_eq!(a, gen_label_mask(&spec, &mut rng(seed)).unwrap());
        }
    }

    #[test]
    fn oversized_cells_are_rejected() {
        let spec = SceneSpec { farm_cell_size_range: (4, 64), ..Default::default() };
        assert!(matches!(gen_label_mask(&spec, &mut rng(0)), Err(Error::Config(_))));
        let spec = SceneSpec { image_size: 40, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noiseless_optical_has_two_levels() {
        let spec = SceneSpec { optical_noise_sigma: 0.0, ..Default::default() };
        let m = gen_label_mask(&spec, &mut rng(2)).unwrap();
        let img = render_optical(&m, &spec, &mut rng(3));
        assert!(img.iter().all(|&v| v == spec.optical_foreground || v == spec.optical_background));
    }

    #[test]
    fn optical_stays_in_unit_range_and_tracks_mean() {
        let spec = SceneSpec { optical_noise_sigma: 0.3, ..Default::default() };
        let full = Mask { size: 64, pixels: vec![FARM; 64 * 64] };
        let img = render_optical(&full, &spec, &mut rng(4));
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        let spec = SceneSpec::default();
        let img = render_optical(&full, &spec, &mut rng(5));
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        assert!((mean - spec.optical_foreground).abs() < 0.02, "{mean}");
    }

    #[test]
    fn speckle_moments() {
        let mut r = rng(6);
        let draws: Vec<f64> = (0..100_000).map(|_| speckle_factor(4, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        assert!((var - 0.25).abs() < 0.025, "{var}");

        // L = 1 is unit exponential: P(s > 1) = e^-1
        let tail = (0..100_000).filter(|_| speckle_factor(1, &mut r) > 1.0).count() as f64 / 1e5;
        assert!((tail - (-1f64).exp()).abs() < 0.01, "{tail}");
    }

    #[test]
    fn sar_in_unit_range() {
        let spec = SceneSpec::default();
        let m = gen_label_mask(&spec, &mut rng(7)).unwrap();
        let img = render_sar(&m, &spec, &mut rng(8));
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_sample_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&SceneSpec::default(), SplitCounts { train: 1, val: 0, test: 0 }, dir.path()).unwrap();
        assert_eq!(m["train"].len(), 1);
        assert!(m["val"].is_empty() && m["test"].is_empty());
        let ds = Dataset::open(dir.path()).unwrap();
        let s = ds.load_split("train").unwrap();
        assert_eq!(s[0].size, 64);
        assert_eq!(s[0].name, "00000");
    }

    #[test]
    fn default_split_proportions() {
        let c = SplitCounts::default();
        assert_eq!(c.train / c.val, 3200 / 600);
    }
}

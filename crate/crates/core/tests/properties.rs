//! Randomized invariants across the library.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarfuse::attention::{double_normalize, external_attention_forward};
use sarfuse::autodiff::{grad_check, ConvGeom, Graph};
use sarfuse::config::{lr_schedule, TrainConfig};
use sarfuse::gan::{GanConfig, GanPair};
use sarfuse::losses::{bce_sigmoid_loss, dice_loss};
use sarfuse::segnet::{AblationConfig, FusionSegNet, SegNetConfig};
use sarfuse::synthdata::{gen_label_mask, render_optical, render_sar, speckle_factor, SceneSpec, FARM, WATER};
use sarfuse::Tensor;

fn tensor(shape: &[usize], seed: u64, bound: f64) -> Tensor {
    Tensor::uniform(shape, bound, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_positive_distributions(rows in 1usize..6, cols in 1usize..6, seed: u64, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[rows, cols], seed, scale));
        for axis in 0..2 {
            let y = g.softmax_axis(x, axis).unwrap();
            let v = g.value(y).data();
            prop_assert!(v.iter().all(|&p| p > 0.0 && p <= 1.0));
            let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
            for o in 0..outer {
                let s: f64 = (0..inner).map(|i| if axis == 0 { v[i * cols + o] } else { v[o * cols + i] }).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_output_extent_formula(
        h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..4, dilation in 1usize..3, padding in 0usize..3,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, h, w], 1.0).unwrap());
        let wt = g.constant(Tensor::full(&[3, 2, k, k], 1.0).unwrap());
        let geom = ConvGeom::new(stride, dilation, padding);
        let extent = |n: usize| (n + 2 * padding).checked_sub(dilation * (k - 1) + 1).map(|v| v / stride + 1);
        match (extent(h), extent(w)) {
            (Some(ho), Some(wo)) => {
                let y = g.conv2d(x, wt, geom).unwrap();
                prop_assert_eq!(g.shape(y), &[1, 3, ho, wo]);
            }
            _ => prop_assert!(g.conv2d(x, wt, geom).is_err()),
        }
    }

    #[test]
    fn double_normalized_rows_sum_to_one(n in 1usize..20, s in 1usize..10, seed: u64, scale in 0.0f64..200.0) {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[n, s], seed, scale));
        let y = double_normalize(&mut g, a).unwrap();
        let v = g.value(y).data();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        for row in v.chunks(s) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn external_attention_is_pixel_permutation_equivariant(n in 2usize..16, seed: u64) {
        let (s, d) = (4, 3);
        let f = tensor(&[n, d], seed, 2.0);
        let mk = tensor(&[s, d], seed ^ 1, 1.0);
        let mv = tensor(&[s, d], seed ^ 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| f.data()[i * d..(i + 1) * d].to_vec()).collect();
        let run = |features: Tensor| {
            let mut g = Graph::new();
            let (fv, kv, vv) = (g.constant(features), g.constant(mk.clone()), g.constant(mv.clone()));
            let y = external_attention_forward(&mut g, fv, kv, vv).unwrap();
            g.value(y).clone()
        };
        let base = run(f.clone());
        let moved = run(Tensor::new(&[n, d], permuted).unwrap());
        for (row, &i) in perm.iter().enumerate() {
            for j in 0..d {
                prop_assert!((moved.data()[row * d + j] - base.data()[i * d + j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dice_is_bounded_and_zero_only_on_agreement(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..64),
        probs in prop::collection::vec(0.0f64..=1.0, 64),
    ) {
        let n = pairs.len();
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(a, b)| (f64::from(a), f64::from(b))).unzip();
        let target = Tensor::new(&[n], y.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[n], x.clone()).unwrap());
        let l = dice_loss(&mut g, xv, &target).unwrap();
        let l = g.value(l).item();
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert_eq!(l == 0.0, x == y);
        let pv = g.constant(Tensor::new(&[n], probs[..n].to_vec()).unwrap());
        let l = dice_loss(&mut g, pv, &target).unwrap();
        let l = g.value(l).item();
        prop_assert!((0.0..1.0).contains(&l));
    }

    #[test]
    fn bce_stays_finite(z in -1e6f64..=1e6, y in 0u8..2) {
        let mut g = Graph::new();
        let zv = g.leaf(Tensor::new(&[1], vec![z]).unwrap(), true);
        let l = bce_sigmoid_loss(&mut g, zv, &Tensor::new(&[1], vec![f64::from(y)]).unwrap()).unwrap();
        prop_assert!(g.value(l).item().is_finite());
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(zv).unwrap()[0].is_finite());
    }

    #[test]
    fn lr_schedule_is_monotone_and_bounded(epochs in 1usize..200, lr_min in 1e-6f64..1e-3, span in 1.0f64..1e3) {
        let cfg = TrainConfig { epochs, lr_min, lr_init: lr_min * span, ..Default::default() };
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], cfg.lr_init);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&l| l >= cfg.lr_min * (1.0 - 1e-12) && l <= cfg.lr_init));
    }

    #[test]
    fn scenes_are_valid(seed: u64, looks in 1u32..8) {
        let spec = SceneSpec { seed, speckle_looks: looks, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = gen_label_mask(&spec, &mut rng).unwrap();
        prop_assert!(mask.pixels.iter().all(|&p| p == FARM || p == WATER));
        let optical = render_optical(&mask, &spec, &mut rng);
        let sar = render_sar(&mask, &spec, &mut rng);
        prop_assert!(optical.iter().chain(&sar).all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_preserves_shape_and_range(seed: u64, b in 1usize..3, side in prop::sample::select(vec![4usize, 8, 16])) {
        let cfg = GanConfig { generator_channels: 2, ..Default::default() };
        let mut pair = GanPair::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in pair.g_xy.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let x = tensor(&[b, 1, side, side], seed, 0.5).map(|v| v + 0.5);
        let y = pair.g_xy.generate(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn segmentation_output_matches_input_extent(
        h in 1usize..4, w in 1usize..4, b in 1usize..3, seed: u64, resolution_mult in 1usize..3,
    ) {
        let cfg = SegNetConfig { width_mult: 0.5, resolution_mult, ..Default::default() };
        let pair = GanPair::new(GanConfig { generator_channels: 2, ..Default::default() }, seed).unwrap();
        let net = FusionSegNet::new(cfg, AblationConfig::FULL, Some(pair.g_xy), seed).unwrap();
        let x = tensor(&[b, 1, 16 * h, 16 * w], seed, 0.5).map(|v| v + 0.5);
        let y = net.predict(&x).unwrap();
        prop_assert_eq!(y.shape(), &[b, 1, 16 * h, 16 * w]);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn speckle_draws_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s: Vec<f64> = (0..100_000).map(|_| speckle_factor(4, &mut rng)).collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let cov: f64 = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    assert!((cov / var).abs() < 0.02, "lag-1 autocorrelation {}", cov / var);
}

#[test]
fn shared_input_gradients_match_finite_differences() {
    let x = tensor(&[2, 3], 5, 1.0);
    let e = grad_check(
        |g, x| {
            let s = g.sigmoid(x);
            let p = g.mul(s, x)?;
            let t = g.transpose(x)?;
            let m = g.matmul(p, t)?;
            Ok(g.sum(m))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8, "{e}");
}

#[test]
fn graphs_are_pure_functions_of_inputs() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 2, 6, 6], 3, 1.0), true);
        let w = g.constant(tensor(&[2, 2, 3, 3], 4, 1.0));
        let y = g.conv2d(x, w, ConvGeom::same(3, 2)).unwrap();
        let y = g.softmax_axis(y, 1).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        (g.value(y).clone(), grads.get(x).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

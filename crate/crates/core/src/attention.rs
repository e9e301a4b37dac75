//! External attention over pixel features.
//!
//! Each pixel feature row is scored against a small learnable key memory,
//! the `N x S` score map is double-normalized (softmax over pixels, then L1
//! over memory units) and the result weights a learnable value memory. The
//! score map is the only intermediate that scales with the pixel count, and
//! it is linear in `N`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::layers::{Conv, Init};
use crate::params::{Binding, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Guard added to the L1 denominator. Softmax output is strictly positive,
/// so the guard only matters if a whole row underflows; a larger constant
/// would bias row sums away from 1 when pixel counts are large.
pub const L1_EPS: f64 = f64::MIN_POSITIVE;

/// Key and value memories, both `[units, dim]`.
#[derive(Clone, Debug)]
pub struct ExternalAttention {
    pub key_memory: ParamId,
    pub value_memory: ParamId,
    pub units: usize,
    pub dim: usize,
}

impl ExternalAttention {
    pub fn new(store: &mut ParamStore, name: &str, units: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if units == 0 || dim == 0 {
            return Err(dim_err!("external attention needs units >= 1 and dim >= 1"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let key_memory = store.add(format!("{name}.key_memory"), Tensor::uniform(&[units, dim], bound, rng)?);
        let value_memory = store.add(format!("{name}.value_memory"), Tensor::uniform(&[units, dim], bound, rng)?);
        Ok(ExternalAttention { key_memory, value_memory, units, dim })
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, features: Var, batch: usize) -> Result<Var> {
        let (mk, mv) = (p.var(self.key_memory), p.var(self.value_memory));
        external_attention_batched(&mut s.graph, features, mk, mv, batch)
    }
}

/// Softmax over the pixel axis (second to last) followed by L1 normalization
/// over the memory axis (last). Accepts `[N,S]` or `[B,N,S]`.
pub fn double_normalize(g: &mut Graph, scores: Var) -> Result<Var> {
    let rank = g.shape(scores).len();
    if !(2..=3).contains(&rank) {
        return Err(dim_err!("double_normalize expects [N,S] or [B,N,S], got {:?}", g.shape(scores)));
    }
    let cols = g.softmax_axis(scores, rank - 2)?;
    g.l1_normalize_axis(cols, rank - 1, L1_EPS)
}

/// `Norm(F Mk^T) Mv` for one image's `[N,d]` feature matrix.
pub fn external_attention_forward(g: &mut Graph, features: Var, key_memory: Var, value_memory: Var) -> Result<Var> {
    external_attention_batched(g, features, key_memory, value_memory, 1)
}

/// Batched external attention over `[B*N, d]` rows, `B = batch`. The pixel
/// softmax runs within each image.
pub fn external_attention_batched(
    g: &mut Graph,
    features: Var,
    key_memory: Var,
    value_memory: Var,
    batch: usize,
) -> Result<Var> {
    let [rows, d] = g.value(features).dims2()?;
    let [units, dk] = g.value(key_memory).dims2()?;
    if g.shape(value_memory) != [units, dk] {
        return Err(dim_err!(
            "key memory {:?} and value memory {:?} must share a shape",
            g.shape(key_memory),
            g.shape(value_memory)
        ));
    }
    if d != dk {
        return Err(dim_err!("features have dimension {d} but memories have {dk}"));
    }
    if batch == 0 || rows % batch != 0 {
        return Err(dim_err!("{rows} feature rows do not split into {batch} images"));
    }
    let kt = g.transpose(key_memory)?;
    let scores = g.matmul(features, kt)?;
    let scores = g.reshape(scores, &[batch, rows / batch, units])?;
    let attn = double_normalize(g, scores)?;
    let attn = g.reshape(attn, &[rows, units])?;
    g.matmul(attn, value_memory)
}

/// Pointwise lift, residual external attention, pointwise reduce.
#[derive(Clone, Debug)]
pub struct AttentionStage {
    pub lift: Conv,
    pub attention: ExternalAttention,
    pub reduce: Conv,
}

impl AttentionStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        units: usize,
        dim: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lift = Conv::pointwise(store, &format!("{name}.lift"), in_channels, dim, true, Init::Fan, rng)?;
        let attention = ExternalAttention::new(store, &format!("{name}.attention"), units, dim, rng)?;
        let reduce = Conv::pointwise(store, &format!("{name}.reduce"), dim, out_channels, true, Init::Fan, rng)?;
        Ok(AttentionStage { lift, attention, reduce })
    }

    /// Lifted features plus the attention output, `[B,d,H,W]`.
    pub fn forward_pre_reduce(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let lifted = self.lift.forward(s, p, x)?;
        let [b, d, h, w] = s.graph.value(lifted).dims4()?;
        let g = &mut s.graph;
        let rows = g.reshape(lifted, &[b, d, h * w])?;
        let rows = g.permute(rows, &[0, 2, 1])?;
        let rows = g.reshape(rows, &[b * h * w, d])?;
        let attended = self.attention.forward(s, p, rows, b)?;
        let g = &mut s.graph;
        let attended = g.reshape(attended, &[b, h * w, d])?;
        let attended = g.permute(attended, &[0, 2, 1])?;
        let attended = g.reshape(attended, &[b, d, h, w])?;
        g.add(attended, lifted)
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let y = self.forward_pre_reduce(s, p, x)?;
        self.reduce.forward(s, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn double_normalize_examples() {
        let mut g = Graph::new();
        let eq = g.constant(Tensor::full(&[5, 4], 0.3).unwrap());
        let n = double_normalize(&mut g, eq).unwrap();
        assert!(g.value(n).data().iter().all(|v| (v - 0.25).abs() < 1e-9));

        let single = g.constant(t(&[3, 1], &[0.1, -2.0, 5.0]));
        let n = double_normalize(&mut g, single).unwrap();
        assert!(g.value(n).data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let a = g.constant(t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
        let n = double_normalize(&mut g, a).unwrap();
        let expect = [0.4, 0.6, 4.0 / 7.0, 3.0 / 7.0];
        for (got, want) in g.value(n).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let f = g.constant(Tensor::uniform(&[6, 3], 2.0, &mut rng).unwrap());
        let mk = g.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng).unwrap());
        let mv = g.constant(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let out = external_attention_forward(&mut g, f, mk, mv).unwrap();
        for row in g.value(out).data().chunks(3) {
            for (a, b) in row.iter().zip([0.5, -1.0, 2.0]) {
                assert!((a - b).abs() < 1e-8);
            }
        }

        let mk_same = g.constant(t(&[2, 3], &[0.3, -0.1, 0.7, 0.3, -0.1, 0.7]));
        let mv2 = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 0.0, -1.0]));
        let out = external_attention_forward(&mut g, f, mk_same, mv2).unwrap();
        for row in g.value(out).data().chunks(3) {
            for (a, b) in row.iter().zip([2.0, 1.0, 1.0]) {
                assert!((a - b).abs() < 1e-8);
            }
        }

        let f1 = g.constant(Tensor::uniform(&[1, 3], 2.0, &mut rng).unwrap());
        let mk2 = g.constant(Tensor::uniform(&[2, 3], 2.0, &mut rng).unwrap());
        let out = external_attention_forward(&mut g, f1, mk2, mv2).unwrap();
        for (a, b) in g.value(out).data().iter().zip([2.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }

        let bad = g.constant(Tensor::zeros(&[6, 4]).unwrap());
        assert!(external_attention_forward(&mut g, bad, mk2, mv2).is_err());
    }

    #[test]
    fn attention_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Tensor::uniform(&[5, 3], 1.0, &mut rng).unwrap();
        let mk = Tensor::uniform(&[4, 3], 1.0, &mut rng).unwrap();
        let mv = Tensor::uniform(&[4, 3], 1.0, &mut rng).unwrap();
        let weights = Tensor::uniform(&[5, 3], 1.0, &mut rng).unwrap();
        let loss = |g: &mut Graph, out: Var| {
            let w = g.constant(weights.clone());
            let p = g.mul(out, w)?;
            Ok(g.sum(p))
        };
        let (mk1, mv1) = (mk.clone(), mv.clone());
        let err = grad_check(
            |g, x| {
                let (a, b) = (g.constant(mk1.clone()), g.constant(mv1.clone()));
                let o = external_attention_forward(g, x, a, b)?;
                loss(g, o)
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |g, x| {
                let (a, b) = (g.constant(f.clone()), g.constant(mv.clone()));
                let o = external_attention_forward(g, a, x, b)?;
                loss(g, o)
            },
            &mk,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn stage_shapes_and_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let stage = AttentionStage::new(&mut store, "att", 2, 1, 4, 3, &mut rng).unwrap();
        store.get_mut(stage.attention.value_memory).value = Tensor::zeros(&[1, 4]).unwrap();
        let x = Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut rng).unwrap();

        let mut s = Session::new(Mode::Eval);
        let p = s.bind(&store, false);
        let xv = s.input(x.clone());
        let out = stage.forward(&mut s, &p, xv).unwrap();
        assert_eq!(s.graph.shape(out), &[2, 3, 4, 4]);

        let mut r = Session::new(Mode::Eval);
        let p = r.bind(&store, false);
        let xv = r.input(x);
        let lifted = stage.lift.forward(&mut r, &p, xv).unwrap();
        let reduced = stage.reduce.forward(&mut r, &p, lifted).unwrap();
        assert!(s.graph.value(out).max_abs_diff(r.graph.value(reduced)) < 1e-15);
    }
}

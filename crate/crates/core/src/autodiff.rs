//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Operations append nodes in evaluation order, so the node index is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients accumulate additively, which makes a tensor consumed by several
//! operations receive the sum of its path gradients.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeom { stride, dilation, padding }
    }

    /// `same`-padded stride-1 geometry for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom { stride: 1, dilation, padding: dilation * (kernel / 2) }
    }

    /// Output extent `floor((n + 2p - d(k-1) - 1)/s) + 1`, or an error when it
    /// would be nonpositive.
    pub fn output_extent(&self, n: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(dim_err!("stride and dilation must be >= 1"));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span {
            return Err(dim_err!(
                "convolution output extent is nonpositive (input {n}, padding {}, effective kernel {span})",
                self.padding
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output positions `o` with `0 <= o*s + tap*d - p < n`.
    fn valid_range(&self, tap: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = (tap * self.dilation) as isize - self.padding as isize;
        // o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // o*s + off <= n-1
        let top = n as isize - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Interpolation used when upsampling spatial maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    /// Half-pixel centers with edge clamping.
    Bilinear,
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Externally supplied per-channel mean and (biased) variance.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ChannelBias { x: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Softmax { x: usize, axis: usize },
    L1Normalize { x: usize, axis: usize, eps: f64 },
    ConcatChannels(usize, usize),
    Upsample { x: usize, factor: usize, mode: Upsample },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    GlobalAvgPool(usize),
    AvgPool { x: usize, factor: usize },
    ExpandSpatial(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    BceWithLogits { z: usize, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require grad
    /// or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v).map(|g| Tensor::new(&self.shapes[v.0], g.to_vec()).expect("grad shape"))
    }
}

/// A differentiation tape. Build with the operation methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} is invalid for shape {shape:?}"));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn bilinear_taps(out: usize, factor: usize, input: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Element count of the biggest tensor on the tape.
    pub fn largest_node(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).max().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: [{m}x{k}] . [{k2}x{n}]"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a.0), &[a.0]))
    }

    /// Dilated cross-correlation of `x` `[B,Cin,H,W]` with `w` `[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let [b, cin, h, wd] = self.value(x).dims4()?;
        let [cout, cin2, kh, kw] = self.value(w).dims4()?;
        if cin != cin2 {
            return Err(dim_err!("conv2d input has {cin} channels but kernel expects {cin2}"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square with odd size, got {kh}x{kw}"));
        }
        let ho = geom.output_extent(h, kh)?;
        let wo = geom.output_extent(wd, kw)?;
        let mut out = vec![0.0; b * cout * ho * wo];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let k = kh;
        for bi in 0..b {
            for oc in 0..cout {
                let oplane = &mut out[(bi * cout + oc) * ho * wo..][..ho * wo];
                for ic in 0..cin {
                    let iplane = &xs[(bi * cin + ic) * h * wd..][..h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = geom.valid_range(ky, h, ho);
                        for kx in 0..k {
                            let (ox0, ox1) = geom.valid_range(kx, wd, wo);
                            let wv = ws[((oc * cin + ic) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                                let irow = &iplane[iy * wd..][..wd];
                                let orow = &mut oplane[oy * wo..][..wo];
                                let xoff = kx * geom.dilation;
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * geom.stride + xoff - geom.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x: x.0, w: w.0, geom }, &[x.0, w.0]))
    }

    /// 1x1 convolution; per-pixel linear mixing of channels.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let [_, _, kh, kw] = self.value(w).dims4()?;
        if kh != 1 || kw != 1 {
            return Err(dim_err!("pointwise convolution needs a 1x1 kernel, got {kh}x{kw}"));
        }
        self.conv2d(x, w, ConvGeom::new(1, 1, 0))
    }

    /// Adds a per-channel bias `b` `[C]` to `x` `[B,C,H,W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [bn, c, h, w] = self.value(x).dims4()?;
        if self.value(b).len() != c {
            return Err(dim_err!("bias has {} entries for {c} channels", self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..bn {
            for ci in 0..c {
                for v in &mut out[(bi * c + ci) * h * w..][..h * w] {
                    *v += bias[ci];
                }
            }
        }
        let t = Tensor::new(&[bn, c, h, w], out)?;
        Ok(self.push(t, Op::ChannelBias { x: x.0, b: b.0 }, &[x.0, b.0]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err!("{name}: shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v * k);
        self.push(t, Op::Scale(a.0, k), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v + k);
        self.push(t, Op::AddScalar(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a.0), &[a.0])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let max = (0..len).map(|i| src[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[base + i * inner] - max).exp();
                    out[base + i * inner] = e;
                    total += e;
                }
                for i in 0..len {
                    out[base + i * inner] /= total;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        Ok(self.push(t, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    /// Divides each slice along `axis` by `(slice sum + eps)`; entries must be
    /// nonnegative.
    pub fn l1_normalize_axis(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        if let Some(bad) = src.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("l1 normalization needs nonnegative entries, found {bad}")));
        }
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let denom = (0..len).map(|i| src[base + i * inner]).sum::<f64>() + eps;
                for i in 0..len {
                    out[base + i * inner] = src[base + i * inner] / denom;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        Ok(self.push(t, Op::L1Normalize { x: x.0, axis, eps }, &[x.0]))
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(dim_err!(
                "concat_channels needs equal batch/spatial extents, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * plane..][..ca * plane]);
            out.extend_from_slice(&db[bi * cb * plane..][..cb * plane]);
        }
        let t = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::ConcatChannels(a.0, b.0), &[a.0, b.0]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.upsample(x, factor, Upsample::Nearest)
    }

    /// Spatial upsampling by an integer factor; bilinear modes clamp at the
    /// edges.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: Upsample) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Domain(format!("upsample factor must be >= 1, got {factor}")));
        }
        let [b, c, h, w] = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        match mode {
            Upsample::Nearest => {
                for p in 0..b * c {
                    let ip = &src[p * h * w..][..h * w];
                    let op = &mut out[p * ho * wo..][..ho * wo];
                    for y in 0..ho {
                        for xo in 0..wo {
                            op[y * wo + xo] = ip[(y / factor) * w + xo / factor];
                        }
                    }
                }
            }
            Upsample::Bilinear => {
                let ty = bilinear_taps(ho, factor, h);
                let tx = bilinear_taps(wo, factor, w);
                for p in 0..b * c {
                    let ip = &src[p * h * w..][..h * w];
                    let op = &mut out[p * ho * wo..][..ho * wo];
                    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let top = ip[y0 * w + x0] * (1.0 - lx) + ip[y0 * w + x1] * lx;
                            let bot = ip[y1 * w + x0] * (1.0 - lx) + ip[y1 * w + x1] * lx;
                            op[y * wo + xo] = top * (1.0 - ly) + bot * ly;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.push(t, Op::Upsample { x: x.0, factor, mode }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("{perm:?} is not a permutation of {rank} axes"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_index_map(&shape, perm);
        let src = self.value(x).data();
        let out = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Permute { x: x.0, perm: perm.to_vec() }, &[x.0]))
    }

    /// `[B,C,H,W]` to `[B,C,1,1]` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let out = (0..b * c).map(|p| src[p * h * w..][..h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let t = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x.0), &[x.0]))
    }

    /// Mean over non-overlapping `factor x factor` windows.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Domain(format!("pool factor must be >= 1, got {factor}")));
        }
        let [b, c, h, w] = self.value(x).dims4()?;
        if h % factor != 0 || w % factor != 0 {
            return Err(dim_err!("avg_pool factor {factor} does not divide {h}x{w}"));
        }
        let (ho, wo) = (h / factor, w / factor);
        let norm = (factor * factor) as f64;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let ip = &src[p * h * w..][..h * w];
            let op = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..h {
                for xi in 0..w {
                    op[(y / factor) * wo + xi / factor] += ip[y * w + xi] / norm;
                }
            }
        }
        let t = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool { x: x.0, factor }, &[x.0]))
    }

    /// Broadcasts `[B,C,1,1]` to `[B,C,h,w]`.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, c, h1, w1] = self.value(x).dims4()?;
        if h1 != 1 || w1 != 1 || h == 0 || w == 0 {
            return Err(dim_err!("expand_spatial needs a [B,C,1,1] input, got {:?}", self.shape(x)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for &v in src {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(t, Op::ExpandSpatial(x.0), &[x.0]))
    }

    /// Per-channel batch normalization of `x` `[B,C,H,W]` with affine
    /// `gamma`, `beta` `[C]`. With [`NormStats::Batch`] the batch mean and
    /// biased variance used are returned alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err!("batch norm affine parameters must have {c} entries"));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let src = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += src[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += src[(bi * c + ci) * plane..][..plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("running statistics must have {c} entries"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for i in off..off + plane {
                    let nv = (src[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = nv;
                    out[i] = g[ci] * nv + be[ci];
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let v = self.push(
            t,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, batch },
            &[x.0, gamma.0, beta.0],
        );
        Ok((v, batch.then_some((mean, var))))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against a constant target,
    /// evaluated as `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        let tz = self.value(z);
        if tz.shape() != target.shape() {
            return Err(dim_err!("bce: logits {:?} vs target {:?}", tz.shape(), target.shape()));
        }
        let n = tz.len() as f64;
        let total: f64 = tz
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits { z: z.0, target: target.data().to_vec() };
        Ok(self.push(Tensor::scalar(total / n), op, &[z.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                slot(grads, nodes, $i)
            };
        }
        let val = |i: usize| nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let [m, k] = nodes[a].value.dims2().unwrap();
                let n = nodes[b].value.shape()[1];
                if wants(a) {
                    // dA = G . B^T
                    let bv = val(b);
                    let ga = acc!(a);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[kk * n + j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if wants(b) {
                    // dB = A^T . G
                    let av = val(a);
                    let gb = acc!(b);
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                gb[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                if wants(a) {
                    let [m, n] = nodes[a].value.dims2().unwrap();
                    let ga = acc!(a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let [b, cin, h, wd] = nodes[x].value.dims4().unwrap();
                let [cout, _, k, _] = nodes[w].value.dims4().unwrap();
                let [_, _, ho, wo] = node.value.dims4().unwrap();
                let xs = val(x);
                let ws = val(w);
                let want_w = wants(w);
                let mut gw = vec![0.0; if want_w { ws.len() } else { 0 }];
                let mut gx = if wants(x) { Some(acc!(x)) } else { None };
                for bi in 0..b {
                    for oc in 0..cout {
                        let gplane = &g[(bi * cout + oc) * ho * wo..][..ho * wo];
                        for ic in 0..cin {
                            let pbase = (bi * cin + ic) * h * wd;
                            for ky in 0..k {
                                let (oy0, oy1) = geom.valid_range(ky, h, ho);
                                for kx in 0..k {
                                    let (ox0, ox1) = geom.valid_range(kx, wd, wo);
                                    let widx = ((oc * cin + ic) * k + ky) * k + kx;
                                    let wv = ws[widx];
                                    let xoff = kx * geom.dilation;
                                    let mut wacc = 0.0;
                                    for oy in oy0..oy1 {
                                        let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                                        let grow = &gplane[oy * wo..][..wo];
                                        let rbase = pbase + iy * wd;
                                        if let Some(gx) = gx.as_deref_mut() {
                                            let gxrow = &mut gx[rbase..][..wd];
                                            for ox in ox0..ox1 {
                                                gxrow[ox * geom.stride + xoff - geom.padding] += wv * grow[ox];
                                            }
                                        }
                                        if want_w {
                                            let xrow = &xs[rbase..][..wd];
                                            for ox in ox0..ox1 {
                                                wacc += grow[ox] * xrow[ox * geom.stride + xoff - geom.padding];
                                            }
                                        }
                                    }
                                    if want_w {
                                        gw[widx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
                if want_w {
                    add_into(acc!(w), &gw);
                }
            }
            &Op::ChannelBias { x, b } => {
                let [bn, c, h, w] = nodes[x].value.dims4().unwrap();
                if wants(x) {
                    add_into(acc!(x), g);
                }
                if wants(b) {
                    let gb = acc!(b);
                    for bi in 0..bn {
                        for ci in 0..c {
                            gb[ci] += g[(bi * c + ci) * h * w..][..h * w].iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    add_into(acc!(b), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    for (s, &gv) in acc!(b).iter_mut().zip(g) {
                        *s -= gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((s, &gv), &y) in acc!(a).iter_mut().zip(g).zip(bv) {
                        *s += gv * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((s, &gv), &x) in acc!(b).iter_mut().zip(g).zip(av) {
                        *s += gv * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    for ((s, &gv), &y) in acc!(a).iter_mut().zip(g).zip(bv) {
                        *s += gv / y;
                    }
                }
                if wants(b) {
                    for (((s, &gv), &x), &y) in acc!(b).iter_mut().zip(g).zip(av).zip(bv) {
                        *s -= gv * x / (y * y);
                    }
                }
            }
            &Op::Scale(a, k) => {
                if wants(a) {
                    for (s, &gv) in acc!(a).iter_mut().zip(g) {
                        *s += k * gv;
                    }
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
            }
            &Op::Relu(a) => {
                if wants(a) {
                    for ((s, &gv), &x) in acc!(a).iter_mut().zip(g).zip(val(a)) {
                        if x > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            &Op::LeakyRelu(a, slope) => {
                if wants(a) {
                    for ((s, &gv), &x) in acc!(a).iter_mut().zip(g).zip(val(a)) {
                        *s += if x > 0.0 { gv } else { slope * gv };
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if wants(a) {
                    for ((s, &gv), &y) in acc!(a).iter_mut().zip(g).zip(node.value.data()) {
                        *s += gv * y * (1.0 - y);
                    }
                }
            }
            &Op::Abs(a) => {
                if wants(a) {
                    for ((s, &gv), &x) in acc!(a).iter_mut().zip(g).zip(val(a)) {
                        *s += gv * x.signum() * f64::from(x != 0.0);
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    for s in acc!(a).iter_mut() {
                        *s += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if wants(a) {
                    let d = g[0] / nodes[a].value.len() as f64;
                    for s in acc!(a).iter_mut() {
                        *s += d;
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if wants(x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), axis).unwrap();
                    let y = node.value.data();
                    let gx = acc!(x);
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: f64 = (0..len).map(|i| g[base + i * inner] * y[base + i * inner]).sum();
                            for i in 0..len {
                                let p = base + i * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::L1Normalize { x, axis, eps } => {
                if wants(x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), axis).unwrap();
                    let xs = val(x);
                    let gx = acc!(x);
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let d = (0..len).map(|i| xs[base + i * inner]).sum::<f64>() + eps;
                            let dot: f64 = (0..len).map(|i| g[base + i * inner] * xs[base + i * inner]).sum();
                            for i in 0..len {
                                let p = base + i * inner;
                                gx[p] += g[p] / d - dot / (d * d);
                            }
                        }
                    }
                }
            }
            &Op::ConcatChannels(a, b) => {
                let [bn, ca, h, w] = nodes[a].value.dims4().unwrap();
                let cb = nodes[b].value.shape()[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if wants(a) {
                    let ga = acc!(a);
                    for bi in 0..bn {
                        add_into(&mut ga[bi * ca * plane..][..ca * plane], &g[bi * stride..][..ca * plane]);
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for bi in 0..bn {
                        add_into(&mut gb[bi * cb * plane..][..cb * plane], &g[bi * stride + ca * plane..][..cb * plane]);
                    }
                }
            }
            &Op::Upsample { x, factor, mode } => {
                if wants(x) {
                    let [b, c, h, w] = nodes[x].value.dims4().unwrap();
                    let (ho, wo) = (h * factor, w * factor);
                    let gx = acc!(x);
                    match mode {
                        Upsample::Nearest => {
                            for p in 0..b * c {
                                let gp = &g[p * ho * wo..][..ho * wo];
                                let ip = &mut gx[p * h * w..][..h * w];
                                for y in 0..ho {
                                    for xo in 0..wo {
                                        ip[(y / factor) * w + xo / factor] += gp[y * wo + xo];
                                    }
                                }
                            }
                        }
                        Upsample::Bilinear => {
                            let ty = bilinear_taps(ho, factor, h);
                            let tx = bilinear_taps(wo, factor, w);
                            for p in 0..b * c {
                                let gp = &g[p * ho * wo..][..ho * wo];
                                let ip = &mut gx[p * h * w..][..h * w];
                                for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                                    for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                                        let gv = gp[y * wo + xo];
                                        ip[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                        ip[y0 * w + x1] += gv * (1.0 - ly) * lx;
                                        ip[y1 * w + x0] += gv * ly * (1.0 - lx);
                                        ip[y1 * w + x1] += gv * ly * lx;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let x = *x;
                if wants(x) {
                    let map = permute_index_map(nodes[x].value.shape(), perm);
                    let gx = acc!(x);
                    for (o, &i) in map.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            &Op::AvgPool { x, factor } => {
                if wants(x) {
                    let [b, c, h, w] = nodes[x].value.dims4().unwrap();
                    let (ho, wo) = (h / factor, w / factor);
                    let norm = (factor * factor) as f64;
                    let gx = acc!(x);
                    for p in 0..b * c {
                        let gp = &g[p * ho * wo..][..ho * wo];
                        let ip = &mut gx[p * h * w..][..h * w];
                        for y in 0..h {
                            for xi in 0..w {
                                ip[y * w + xi] += gp[(y / factor) * wo + xi / factor] / norm;
                            }
                        }
                    }
                }
            }
            &Op::GlobalAvgPool(x) => {
                if wants(x) {
                    let [_, _, h, w] = nodes[x].value.dims4().unwrap();
                    let plane = h * w;
                    let gx = acc!(x);
                    for (p, &gv) in g.iter().enumerate() {
                        let d = gv / plane as f64;
                        for s in &mut gx[p * plane..][..plane] {
                            *s += d;
                        }
                    }
                }
            }
            &Op::ExpandSpatial(x) => {
                if wants(x) {
                    let [_, _, h, w] = node.value.dims4().unwrap();
                    let plane = h * w;
                    let gx = acc!(x);
                    for (p, s) in gx.iter_mut().enumerate() {
                        *s += g[p * plane..][..plane].iter().sum::<f64>();
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let [bn, c, h, w] = nodes[x].value.dims4().unwrap();
                let plane = h * w;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bn {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for i in off..off + plane {
                            sum_g[ci] += g[i];
                            sum_gx[ci] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(gamma) {
                    add_into(acc!(gamma), &sum_gx);
                }
                if wants(beta) {
                    add_into(acc!(beta), &sum_g);
                }
                if wants(x) {
                    let gm = val(gamma);
                    let count = (bn * plane) as f64;
                    let gx = acc!(x);
                    for bi in 0..bn {
                        for ci in 0..c {
                            let k = gm[ci] * inv_std[ci];
                            let off = (bi * c + ci) * plane;
                            for i in off..off + plane {
                                gx[i] += if *batch {
                                    k * (g[i] - sum_g[ci] / count - xhat[i] * sum_gx[ci] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { z, target } => {
                let z = *z;
                if wants(z) {
                    let zs = val(z);
                    let n = zs.len() as f64;
                    let gz = acc!(z);
                    for ((s, &zv), &y) in gz.iter_mut().zip(zs).zip(target) {
                        *s += g[0] * (sigmoid(zv) - y) / n;
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'g mut Vec<f64> {
    let len = nodes[i].value.len();
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..][..n]) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// For each output flat index, the input flat index it reads.
fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Central-difference gradient of the scalar `f` at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Reverse-mode gradient of the scalar `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    Ok(grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// `max_i |a_i - n_i| / max(1, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the backward-pass gradient of `f` at `x` against central finite
/// differences and returns the maximum relative error over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

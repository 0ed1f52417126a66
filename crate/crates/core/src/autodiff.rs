//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`ComputeGraph`] is a tape: every op appends a node holding its output
//! and whatever it needs for the backward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order.
//! Parameters are leaves registered under a name; [`ComputeGraph::backward`]
//! returns their gradients keyed by that name.
//!
//! Layouts: images are `[n, c, h, w]`, dense activations `[n, features]`,
//! conv kernels `[c_out, c_in, k, k]`, dense weights `[out, in]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Gradients keyed by parameter name.
pub type GradTable = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise op wrapped by the injection node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Relu,
    Identity,
}

impl Sigma {
    fn apply(self, x: f64) -> f64 {
        match self {
            Sigma::Relu => relu(x),
            Sigma::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Sigma::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Sigma::Identity => 1.0,
        }
    }
}

/// Batch normalization statistics source.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Square(Var),
    Sum(Var),
    Relu(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Psi {
        x: Var,
        d: Var,
        dbar: Var,
        sigma: Sigma,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. } | Op::Square(x) | Op::Sum(x) | Op::Relu(x) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AvgPool { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Psi { x, d, dbar, .. } => vec![*x, *d, *dbar],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-batch statistics recorded by a batch-statistics normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (used for running-statistics updates).
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    loss: Option<Var>,
    batch_stats: BTreeMap<usize, BatchStats>,
    backward_done: bool,
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn conv_out(len: usize, k: usize, geom: ConvGeometry) -> Option<usize> {
    let padded = len + 2 * geom.padding;
    if padded < k || geom.stride == 0 {
        return None;
    }
    Some((padded - k) / geom.stride + 1)
}

/// Range of output positions `o` whose input index `o*stride + tap - padding`
/// lies inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, tap: usize, geom: ConvGeometry) -> (usize, usize) {
    let s = geom.stride;
    let p = geom.padding;
    let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
    // need o*s + tap - p <= len - 1  =>  o <= (len - 1 + p - tap) / s
    let hi = if len + p < tap + 1 {
        0
    } else {
        ((len - 1 + p - tap) / s + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

/// Patch matrix `[ci·k·k][n·oh·ow]`; out-of-bounds taps stay zero.
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane = d.oh * d.ow;
    let width = d.n * plane;
    let (s, p) = (d.geom.stride, d.geom.padding);
    let mut cols = vec![0.0; d.ci * d.k * d.k * width];
    for c in 0..d.ci {
        for kh in 0..d.k {
            let (r0, r1) = valid_range(d.oh, d.h, kh, d.geom);
            for kw in 0..d.k {
                let (c0, c1) = valid_range(d.ow, d.w, kw, d.geom);
                let row = &mut cols[((c * d.k + kh) * d.k + kw) * width..][..width];
                for ni in 0..d.n {
                    let src = &x[(ni * d.ci + c) * d.h * d.w..][..d.h * d.w];
                    for r in r0..r1 {
                        let ih = r * s + kh - p;
                        let dst = &mut row[ni * plane + r * d.ow..][..d.ow];
                        for q in c0..c1 {
                            dst[q] = src[ih * d.w + q * s + kw - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(dcols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let plane = d.oh * d.ow;
    let width = d.n * plane;
    let (s, p) = (d.geom.stride, d.geom.padding);
    for c in 0..d.ci {
        for kh in 0..d.k {
            let (r0, r1) = valid_range(d.oh, d.h, kh, d.geom);
            for kw in 0..d.k {
                let (c0, c1) = valid_range(d.ow, d.w, kw, d.geom);
                let row = &dcols[((c * d.k + kh) * d.k + kw) * width..][..width];
                for ni in 0..d.n {
                    let dst = &mut dx[(ni * d.ci + c) * d.h * d.w..][..d.h * d.w];
                    for r in r0..r1 {
                        let ih = r * s + kh - p;
                        let src = &row[ni * plane + r * d.ow..][..d.ow];
                        for q in c0..c1 {
                            dst[ih * d.w + q * s + kw - p] += src[q];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss with respect to `v`, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn loss(&self) -> Option<Var> {
        self.loss
    }

    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        self.batch_stats.get(&v.0)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Input)
    }

    /// Registers a named trainable leaf. Names must be unique per graph.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        let v = self.push("param", t, Op::Param)?;
        self.params.insert(name, v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("affine", t, Op::Affine { x, scale })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("square", t, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| relu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("relu", t, Op::Relu(x))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "dense",
                format!("input {:?} with weight {:?}", xs, ws),
            ));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xd[i * inp..(i + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for k in 0..inp {
                    acc += xr[k] * wr[k];
                }
                y[i * out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for i in 0..n {
                for o in 0..out {
                    y[i * out + o] += bd[o];
                }
            }
        }
        let t = Tensor::new(vec![n, out], y)?;
        self.push("dense", t, Op::Dense { x, w, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}", xs, ws),
            ));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (oh, ow) = match (conv_out(h, k, geom), conv_out(wd, k, geom)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} does not fit input {h}x{wd} with {geom:?}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {co} output channels", self.shape(b)),
                ));
            }
        }
        let dims = ConvDims { n, ci, h, w: wd, k, oh, ow, geom };
        let cols = im2col(self.data(x), &dims);
        let kd = self.data(w);
        let plane = oh * ow;
        let width = n * plane;
        let kk = ci * k * k;
        let mut y = vec![0.0; n * co * plane];
        let mut acc = vec![0.0; width];
        for o in 0..co {
            acc.fill(0.0);
            for j in 0..kk {
                axpy(kd[o * kk + j], &cols[j * width..(j + 1) * width], &mut acc);
            }
            let bias = b.map_or(0.0, |b| self.nodes[b.0].value.data()[o]);
            for ni in 0..n {
                let dst = &mut y[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                for (d, a) in dst.iter_mut().zip(&acc[ni * plane..(ni + 1) * plane]) {
                    *d = a + bias;
                }
            }
        }
        let t = Tensor::new(vec![n, co, oh, ow], y)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom })
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("input rank {} (expected 2 or 4)", xs.len()),
            ));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "scale {:?} / shift {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let m = n * spatial;
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let idx = |i: usize, ch: usize, sp: usize| (i * c + ch) * spatial + sp;

        let (mean, var, stats) = match &mode {
            BnMode::Batch => {
                if m < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "batch statistics need at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        for sp in 0..spatial {
                            acc += xd[idx(i, ch, sp)];
                        }
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        for sp in 0..spatial {
                            let d = xd[idx(i, ch, sp)] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                for sp in 0..spatial {
                    let j = idx(i, ch, sp);
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    x_hat[j] = h;
                    y[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = Tensor::new(xs, y)?;
        let v = self.push(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        )?;
        if let Some(stats) = stats {
            self.batch_stats.insert(v.0, stats);
        }
        Ok(v)
    }

    /// Non-overlapping average pooling with window `kernel` (stride = kernel).
    /// `None` pools the whole spatial extent.
    pub fn avg_pool(&mut self, x: Var, kernel: Option<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("avg_pool", format!("input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if kernel.is_none() && h != w {
            return Err(Error::shape(
                "avg_pool",
                format!("global pooling needs a square map, got {h}x{w}"),
            ));
        }
        let k = kernel.unwrap_or(h);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("window {k} does not tile {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let xd = self.data(x);
        let norm = 1.0 / (k * k) as f64;
        let mut y = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for dr in 0..k {
                        for dq in 0..k {
                            acc += xd[plane * h * w + (r * k + dr) * w + q * k + dq];
                        }
                    }
                    y[plane * oh * ow + r * ow + q] = acc * norm;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], y)?;
        self.push("avg_pool", t, Op::AvgPool { x, kernel: k })
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(Error::shape("flatten", "rank-0 input"));
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let t = self.value(x).clone().reshape(vec![n, rest])?;
        self.push("flatten", t, Op::Reshape(x))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat", format!("input {:?}", base)));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            channels += s[1];
        }
        let n = base[0];
        let spatial: usize = base[2..].iter().product();
        let mut y = Vec::with_capacity(n * channels * spatial);
        for i in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                y.extend_from_slice(&self.data(v)[i * c * spatial..(i + 1) * c * spatial]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let t = Tensor::new(shape, y)?;
        self.push("concat", t, Op::Concat(xs.to_vec()))
    }

    /// Injection node: `d*x - dbar*x + sigma(x)` with per-channel `d`, `dbar`.
    ///
    /// When `d == dbar` bitwise the two products are identical, their
    /// difference is exactly zero and the output equals `sigma(x)` bit for bit.
    pub fn psi(&mut self, x: Var, d: Var, dbar: Var, sigma: Sigma) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("psi", format!("input {:?}", xs)));
        }
        let c = xs[1];
        if self.shape(d) != [c] || self.shape(dbar) != [c] {
            return Err(Error::shape(
                "psi",
                format!(
                    "diagonals {:?} / {:?} for {c} channels",
                    self.shape(d),
                    self.shape(dbar)
                ),
            ));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let dd = self.data(d);
        let bd = self.data(dbar);
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                for sp in 0..spatial {
                    let j = (i * c + ch) * spatial + sp;
                    let v = xd[j];
                    let offset = dd[ch] * v - bd[ch] * v;
                    let s = sigma.apply(v);
                    // x + 0.0 flips -0.0 to +0.0; skip the add when it is a no-op
                    y[j] = if offset == 0.0 { s } else { offset + s };
                }
            }
        }
        let t = Tensor::new(xs, y)?;
        self.push("psi", t, Op::Psi { x, d, dbar, sigma })
    }

    /// Mean softmax cross-entropy over the batch; marks the result as the loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", ls, labels.len()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        if n == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of {k} classes"),
            ));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss += mx + denom.ln() - row[labels[i]];
        }
        let loss = (loss / n as f64).max(0.0);
        let v = self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )?;
        self.loss = Some(v);
        Ok(v)
    }

    /// Marks an arbitrary scalar node as the loss.
    pub fn set_loss(&mut self, v: Var) -> Result<()> {
        if self.value(v).numel() != 1 {
            return Err(Error::shape(
                "set_loss",
                format!("loss must be scalar, got {:?}", self.shape(v)),
            ));
        }
        self.loss = Some(v);
        Ok(())
    }

    /// Reverse pass from the marked loss. Every parameter reachable from the
    /// loss gets an entry; unreachable parameters are absent.
    pub fn backward(&mut self) -> Result<GradTable> {
        let loss = self
            .loss
            .ok_or_else(|| Error::State("backward called before a loss was computed".into()))?;
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        let count = loss.0 + 1;
        let mut reachable = vec![false; count];
        reachable[loss.0] = true;
        for i in (0..count).rev() {
            if reachable[i] {
                for inp in self.nodes[i].op.inputs() {
                    reachable[inp.0] = true;
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].value.set_grad(g)?;
            } else if reachable[i] {
                let n = self.nodes[i].value.numel();
                self.nodes[i].value.set_grad(vec![0.0; n])?;
            }
        }
        self.backward_done = true;
        let mut table = GradTable::new();
        for (name, v) in &self.params {
            if v.0 < count && reachable[v.0] {
                let node = &self.nodes[v.0].value;
                let g = node.grad().expect("reachable node has a gradient").to_vec();
                table.insert(name.clone(), Tensor::new(node.shape().to_vec(), g)?);
            }
        }
        Ok(table)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let dst = acc(grads, v, g.len());
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let da = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] * bd[j];
                }
                let db = acc(grads, *b, g.len());
                for j in 0..g.len() {
                    db[j] += g[j] * ad[j];
                }
            }
            Op::Affine { x, scale } => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += scale * g[j];
                }
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += 2.0 * xd[j] * g[j];
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = acc(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    if xd[j] > 0.0 {
                        dx[j] += g[j];
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = acc(grads, *x, g.len());
                for (d, s) in dx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Dense { x, w, b } => self.dense_backward(*x, *w, *b, g, grads),
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, *geom, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = (n * spatial) as f64;
                let gd = self.data(*gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ii in 0..n {
                    for ch in 0..c {
                        for sp in 0..spatial {
                            let j = (ii * c + ch) * spatial + sp;
                            dgamma[ch] += g[j] * x_hat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let dx = acc(grads, *x, g.len());
                for ii in 0..n {
                    for ch in 0..c {
                        for sp in 0..spatial {
                            let j = (ii * c + ch) * spatial + sp;
                            dx[j] += if *batch_stats {
                                gd[ch] * inv_std[ch] / m
                                    * (m * g[j] - dbeta[ch] - x_hat[j] * dgamma[ch])
                            } else {
                                gd[ch] * inv_std[ch] * g[j]
                            };
                        }
                    }
                }
                let dg = acc(grads, *gamma, c);
                for ch in 0..c {
                    dg[ch] += dgamma[ch];
                }
                let db = acc(grads, *beta, c);
                for ch in 0..c {
                    db[ch] += dbeta[ch];
                }
            }
            Op::AvgPool { x, kernel } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let k = *kernel;
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let dx = acc(grads, *x, n * c * h * w);
                for plane in 0..n * c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let gv = g[plane * oh * ow + r * ow + q] * norm;
                            for dr in 0..k {
                                for dq in 0..k {
                                    dx[plane * h * w + (r * k + dr) * w + q * k + dq] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let n = shape[0];
                let total_c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let dv = acc(grads, v, n * c * spatial);
                    for ii in 0..n {
                        let src = &g[(ii * total_c + offset) * spatial..(ii * total_c + offset + c) * spatial];
                        let dst = &mut dv[ii * c * spatial..(ii + 1) * c * spatial];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    offset += c;
                }
            }
            Op::Psi { x, d, dbar, sigma } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let xd = self.data(*x);
                let dd = self.data(*d);
                let bd = self.data(*dbar);
                let mut gdiag = vec![0.0; c];
                {
                    let dx = acc(grads, *x, g.len());
                    for ii in 0..n {
                        for ch in 0..c {
                            let lin = dd[ch] - bd[ch];
                            for sp in 0..spatial {
                                let j = (ii * c + ch) * spatial + sp;
                                let v = xd[j];
                                dx[j] += (lin + sigma.derivative(v)) * g[j];
                                gdiag[ch] += v * g[j];
                            }
                        }
                    }
                }
                let gd = acc(grads, *d, c);
                for ch in 0..c {
                    gd[ch] += gdiag[ch];
                }
                let gb = acc(grads, *dbar, c);
                for ch in 0..c {
                    gb[ch] -= gdiag[ch];
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let dz = acc(grads, *logits, n * k);
                for ii in 0..n {
                    for j in 0..k {
                        let target = if labels[ii] == j { 1.0 } else { 0.0 };
                        dz[ii * k + j] += scale * (probs[ii * k + j] - target);
                    }
                }
            }
        }
        Ok(())
    }

    fn dense_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let (n, inp) = (xs[0], xs[1]);
        let out = self.shape(w)[0];
        let xd = self.data(x);
        let wd = self.data(w);
        {
            let dx = grads[x.0].get_or_insert_with(|| vec![0.0; n * inp]);
            for i in 0..n {
                for o in 0..out {
                    let gv = g[i * out + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let wr = &wd[o * inp..(o + 1) * inp];
                    let dr = &mut dx[i * inp..(i + 1) * inp];
                    for k in 0..inp {
                        dr[k] += gv * wr[k];
                    }
                }
            }
        }
        {
            let dw = grads[w.0].get_or_insert_with(|| vec![0.0; out * inp]);
            for o in 0..out {
                let dr = &mut dw[o * inp..(o + 1) * inp];
                for i in 0..n {
                    let gv = g[i * out + o];
                    let xr = &xd[i * inp..(i + 1) * inp];
                    for k in 0..inp {
                        dr[k] += gv * xr[k];
                    }
                }
            }
        }
        if let Some(b) = b {
            let db = grads[b.0].get_or_insert_with(|| vec![0.0; out]);
            for i in 0..n {
                for o in 0..out {
                    db[o] += g[i * out + o];
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (oh, ow) = (
            conv_out(h, k, geom).unwrap(),
            conv_out(wd, k, geom).unwrap(),
        );
        let dims = ConvDims { n, ci, h, w: wd, k, oh, ow, geom };
        let cols = im2col(self.data(x), &dims);
        let kd = self.data(w);
        let plane = oh * ow;
        let width = n * plane;
        let kk = ci * k * k;
        // upstream gradient regrouped as [co][n * plane]
        let mut gm = vec![0.0; co * width];
        for ni in 0..n {
            for o in 0..co {
                gm[o * width + ni * plane..o * width + (ni + 1) * plane]
                    .copy_from_slice(&g[(ni * co + o) * plane..(ni * co + o + 1) * plane]);
            }
        }
        let mut dw = grads[w.0].take().unwrap_or_else(|| vec![0.0; co * kk]);
        let mut dcols = vec![0.0; kk * width];
        for o in 0..co {
            let grow = &gm[o * width..(o + 1) * width];
            for j in 0..kk {
                dw[o * kk + j] += dot(grow, &cols[j * width..(j + 1) * width]);
                axpy(kd[o * kk + j], grow, &mut dcols[j * width..(j + 1) * width]);
            }
        }
        let mut dx = grads[x.0].take().unwrap_or_else(|| vec![0.0; n * ci * h * wd]);
        col2im(&dcols, &dims, &mut dx);
        grads[x.0] = Some(dx);
        grads[w.0] = Some(dw);
        if let Some(b) = b {
            let db = grads[b.0].get_or_insert_with(|| vec![0.0; co]);
            for ni in 0..n {
                for o in 0..co {
                    db[o] += g[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow]
                        .iter()
                        .sum::<f64>();
                }
            }
        }
    }
}

/// Sums gradient tables in the given order. Entries present in only some
/// tables are kept as-is.
pub fn sum_grad_tables<'a>(tables: impl IntoIterator<Item = &'a GradTable>) -> Result<GradTable> {
    let mut out = GradTable::new();
    for t in tables {
        for (name, g) in t {
            match out.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape(
                            "sum_grad_tables",
                            format!("`{name}`: {:?} vs {:?}", acc.shape(), g.shape()),
                        ));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Central finite difference `(L(θ + h e_i) − L(θ − h e_i)) / 2h` for one
/// scalar entry of a named parameter. The store is restored before returning.
pub fn finite_diff<F>(
    params: &mut crate::tensor::ParamStore,
    name: &str,
    index: usize,
    h: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&crate::tensor::ParamStore) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let original = {
        let t = params.require(name)?;
        *t.data().get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("index {index} out of `{name}` ({} entries)", t.numel()))
        })?
    };
    params.require_mut(name)?.data_mut()[index] = original + h;
    let plus = loss(params);
    params.require_mut(name)?.data_mut()[index] = original - h;
    let minus = loss(params);
    params.require_mut(name)?.data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * h))
}

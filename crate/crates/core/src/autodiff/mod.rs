//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Graph`] is the computation record: every op appends a node holding its
//! output value and whatever forward context its backward rule needs. Nodes
//! are appended in execution order, so the record is topologically ordered by
//! construction and the backward pass is a single reverse sweep.

mod kernels;

use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{bilinear_tap, normalized_coord};
use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimator folded into running statistics.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    AffineGrid {
        theta: Var,
    },
    BilinearSample {
        x: Var,
        grid: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f64,
    },
    Mean {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Tensor,
    },
    Mse {
        a: Var,
        b: Var,
    },
    NegLogMean {
        p: Var,
        complement: bool,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("computation record already consumed by backward".into()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (f, wc, k, k2) = self.value(w).dims4()?;
        ensure!(k == k2, "conv2d kernel must be square, got {k}x{k2}");
        ensure!(
            wc == c,
            "conv2d: input has {c} channels, weight expects {wc}"
        );
        ensure!(stride >= 1, "conv2d: stride must be >= 1");
        ensure!(
            k <= h + 2 * pad && k <= wd + 2 * pad,
            "conv2d: kernel {k} larger than padded input {h}x{wd} (pad {pad})"
        );
        if let Some(b) = b {
            ensure!(
                self.value(b).numel() == f,
                "conv2d: bias has {} values for {f} filters",
                self.value(b).numel()
            );
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            f,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, f, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (wc, f, k, k2) = self.value(w).dims4()?;
        ensure!(k == k2, "conv_transpose2d kernel must be square, got {k}x{k2}");
        ensure!(
            wc == c,
            "conv_transpose2d: input has {c} channels, weight expects {wc}"
        );
        ensure!(stride >= 1, "conv_transpose2d: stride must be >= 1");
        let ho = (h as isize - 1) * stride as isize - 2 * pad as isize + k as isize;
        let wo = (wd as isize - 1) * stride as isize - 2 * pad as isize + k as isize;
        ensure!(
            ho > 0 && wo > 0,
            "conv_transpose2d: computed output extent {ho}x{wo} is not positive"
        );
        let (ho, wo) = (ho as usize, wo as usize);
        if let Some(b) = b {
            ensure!(
                self.value(b).numel() == f,
                "conv_transpose2d: bias has {} values for {f} filters",
                self.value(b).numel()
            );
        }
        let geom = ConvGeom::new(f, ho, wo, k, stride, pad);
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            c,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, f, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs)
    }

    /// Per-channel batch normalization. In [`Mode::Train`] the batch statistics
    /// are used and returned so the caller can fold them into its running
    /// estimates; in [`Mode::Eval`] `running` must hold `(mean, var)`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: Mode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure!(
            self.value(gamma).numel() == c && self.value(beta).numel() == c,
            "batch_norm2d: affine parameters must have {c} entries"
        );
        let plane = h * w;
        let m = n * plane;
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                ensure!(
                    m >= 2,
                    "batch_norm2d in train mode needs N*H*W >= 2, got {m}"
                );
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (mu, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xs[(i * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    *mu = s / m as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += xs[(i * c + ch) * plane..][..plane]
                            .iter()
                            .map(|x| (x - *mu) * (x - *mu))
                            .sum::<f64>();
                    }
                    *v = q / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::InvalidArgument("batch_norm2d eval mode needs running statistics".into())
                })?;
                ensure!(
                    rm.len() == c && rv.len() == c,
                    "batch_norm2d: running statistics must have {c} entries"
                );
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    xhat[j] = (xs[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok((self.push(value, op, &[x, gamma, beta])?, stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure!(window >= 1 && stride >= 1, "max_pool2d: window and stride must be >= 1");
        ensure!(
            h >= window && w >= window,
            "max_pool2d: window {window} larger than input {h}x{w}"
        );
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let j = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xs[j] > xs[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, wdin) = self.value(w).dims2()?;
        ensure!(
            din == wdin,
            "linear: input width {din} does not match weight width {wdin}"
        );
        if let Some(b) = b {
            ensure!(
                self.value(b).numel() == dout,
                "linear: bias has {} values for {dout} outputs",
                self.value(b).numel()
            );
        }
        let mut out = vec![0.0; n * dout];
        kernels::gemm(
            n,
            din,
            dout,
            1.0,
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (1, din),
            0.0,
            &mut out,
            (dout, 1),
        );
        if let Some(b) = b {
            let bs = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bs).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(stable_sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Sampling grid `[N, h, w, 2]` of source coordinates `(x_s, y_s)` for a
    /// batch of similarity parameters `theta = [N, 4]` laid out `(a, b, tx, ty)`.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let (n, four) = self.value(theta).dims2()?;
        ensure!(four == 4, "affine_grid: expected [N, 4] parameters, got width {four}");
        ensure!(h >= 1 && w >= 1, "affine_grid: grid extents must be positive");
        let th = self.value(theta).data();
        let mut out = vec![0.0; n * h * w * 2];
        for i in 0..n {
            let [a, b, tx, ty] = [th[4 * i], th[4 * i + 1], th[4 * i + 2], th[4 * i + 3]];
            for r in 0..h {
                let yt = normalized_coord(r, h);
                for c in 0..w {
                    let xt = normalized_coord(c, w);
                    let o = ((i * h + r) * w + c) * 2;
                    out[o] = a * xt - b * yt + tx;
                    out[o + 1] = b * xt + a * yt + ty;
                }
            }
        }
        let value = Tensor::new(&[n, h, w, 2], out)?;
        self.push(value, Op::AffineGrid { theta }, &[theta])
    }

    /// Bilinear sampling of `x [N, C, H, W]` at `grid [N, Ho, Wo, 2]`; taps that
    /// fall outside the image read zero.
    pub fn bilinear_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let gs = self.value(grid).shape();
        ensure!(
            gs.len() == 4 && gs[0] == n && gs[3] == 2,
            "bilinear_sample: grid shape {gs:?} incompatible with input batch {n}"
        );
        let (ho, wo) = (gs[1], gs[2]);
        let xs = self.value(x).data();
        let grid_v = self.value(grid).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for i in 0..n {
            for p in 0..ho * wo {
                let o = (i * ho * wo + p) * 2;
                let tap = bilinear_tap(grid_v[o], grid_v[o + 1], h, w);
                for ch in 0..c {
                    let src = &xs[(i * c + ch) * h * w..][..h * w];
                    let mut acc = 0.0;
                    for (idx, wt) in tap.idx.iter().zip(tap.wts) {
                        if let Some(j) = idx {
                            acc += wt * src[*j];
                        }
                    }
                    out[(i * c + ch) * ho * wo + p] = acc;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(value, Op::BilinearSample { x, grid }, &[x, grid])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::stack_batch(&values)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Batch items `[start, start + len)`.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_batch(start, len)?;
        self.push(value, Op::SliceBatch { x, start }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x -= y);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|v| k * v);
        self.push(value, Op::Scale { a, k }, &[a])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push(value, Op::SumSquares { x }, &[x])
    }

    /// `sum(x * weights)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        ensure!(
            self.value(x).shape() == weights.shape(),
            "dot_const: shape mismatch {:?} vs {:?}",
            self.value(x).shape(),
            weights.shape()
        );
        let value = Tensor::scalar(self.value(x).dot(&weights));
        self.push(value, Op::DotConst { x, weights }, &[x])
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        self.push(value, Op::Mse { a, b }, &[a, b])
    }

    /// `-mean(log p)` with `p` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn neg_log_mean(&mut self, p: Var) -> Result<Var> {
        self.neg_log_impl(p, false)
    }

    /// `-mean(log(1 - p))` with the same clamp.
    pub fn neg_log1m_mean(&mut self, p: Var) -> Result<Var> {
        self.neg_log_impl(p, true)
    }

    fn neg_log_impl(&mut self, p: Var, complement: bool) -> Result<Var> {
        let pv = self.value(p).data();
        let s: f64 = pv
            .iter()
            .map(|&x| {
                let q = clamp_prob(x);
                -(if complement { 1.0 - q } else { q }).ln()
            })
            .sum();
        let value = Tensor::scalar(s / pv.len() as f64);
        self.push(value, Op::NegLogMean { p, complement }, &[p])
    }

    /// Runs the backward pass from a scalar `loss`, consuming the record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward called twice on the same computation record".into(),
            ));
        }
        ensure!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        let mut by_leaf = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(Var(id), Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let f = self.value(*w).shape()[0];
                let r = kernels::conv2d_backward(
                    xv.data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    f,
                    g,
                    (need(*x), need(*w), b.is_some_and(need)),
                );
                if let Some(dx) = r.dx {
                    acc(*x, &dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, &dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, &db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let r = kernels::conv_transpose2d_backward(
                    xv.data(),
                    n,
                    c,
                    geom,
                    self.value(*w).data(),
                    g,
                    (need(*x), need(*w), b.is_some_and(need)),
                );
                if let Some(dx) = r.dx {
                    acc(*x, &dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, &dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if need(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + plane {
                                dx[j] = if *batch_stats {
                                    k / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    acc(*x, &dx);
                }
                acc(*gamma, &dgamma);
                acc(*beta, &dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v >= 0.0 { d } else { slope * d })
                    .collect();
                acc(*x, &dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&j, &d) in argmax.iter().zip(g) {
                    dx[j] += d;
                }
                acc(*x, &dx);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2()?;
                let dout = self.value(*w).shape()[0];
                if need(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        g,
                        (dout, 1),
                        self.value(*w).data(),
                        (din, 1),
                        0.0,
                        &mut dx,
                        (din, 1),
                    );
                    acc(*x, &dx);
                }
                if need(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        1.0,
                        g,
                        (1, dout),
                        self.value(*x).data(),
                        (din, 1),
                        0.0,
                        &mut dw,
                        (din, 1),
                    );
                    acc(*w, &dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(*b, &db);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx: Vec<f64> = y.iter().zip(g).map(|(y, d)| d * y * (1.0 - y)).collect();
                acc(*x, &dx);
            }
            Op::Reshape { x } => acc(*x, g),
            Op::AffineGrid { theta } => {
                let (_, h, w, _) = node.value.dims4()?;
                let n = self.value(*theta).shape()[0];
                let mut dth = vec![0.0; n * 4];
                for i in 0..n {
                    for r in 0..h {
                        let yt = normalized_coord(r, h);
                        for c in 0..w {
                            let xt = normalized_coord(c, w);
                            let o = ((i * h + r) * w + c) * 2;
                            let (gx, gy) = (g[o], g[o + 1]);
                            dth[4 * i] += gx * xt + gy * yt;
                            dth[4 * i + 1] += -gx * yt + gy * xt;
                            dth[4 * i + 2] += gx;
                            dth[4 * i + 3] += gy;
                        }
                    }
                }
                acc(*theta, &dth);
            }
            Op::BilinearSample { x, grid } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let xs = self.value(*x).data();
                let gv = self.value(*grid).data();
                let mut dx = need(*x).then(|| vec![0.0; xs.len()]);
                let mut dgrid = need(*grid).then(|| vec![0.0; gv.len()]);
                let sx = 0.5 * w.saturating_sub(1) as f64;
                let sy = 0.5 * h.saturating_sub(1) as f64;
                for i in 0..n {
                    for p in 0..ho * wo {
                        let o = (i * ho * wo + p) * 2;
                        let tap = bilinear_tap(gv[o], gv[o + 1], h, w);
                        let (mut dpx, mut dpy) = (0.0, 0.0);
                        for ch in 0..c {
                            let d = g[(i * c + ch) * ho * wo + p];
                            if d == 0.0 {
                                continue;
                            }
                            let base = (i * c + ch) * h * w;
                            if let Some(dx) = dx.as_mut() {
                                for (idx, wt) in tap.idx.iter().zip(tap.wts) {
                                    if let Some(j) = idx {
                                        dx[base + j] += wt * d;
                                    }
                                }
                            }
                            if dgrid.is_some() {
                                let v = |k: usize| tap.idx[k].map_or(0.0, |j| xs[base + j]);
                                let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                                dpx += d * ((v01 - v00) * (1.0 - tap.fy) + (v11 - v10) * tap.fy);
                                dpy += d * ((v10 - v00) * (1.0 - tap.fx) + (v11 - v01) * tap.fx);
                            }
                        }
                        if let Some(dg) = dgrid.as_mut() {
                            dg[o] += dpx * sx;
                            dg[o + 1] += dpy * sy;
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, &dx);
                }
                if let Some(dg) = dgrid {
                    acc(*grid, &dg);
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let xv = self.value(*x);
                let item = xv.numel() / xv.shape()[0];
                let mut d = vec![0.0; xv.numel()];
                d[start * item..start * item + g.len()].copy_from_slice(g);
                acc(*x, &d);
            }
            Op::Add { a, b } => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Sub { a, b } => {
                acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, &neg);
            }
            Op::Scale { a, k } => {
                let d: Vec<f64> = g.iter().map(|v| k * v).collect();
                acc(*a, &d);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, &vec![g[0] / n as f64; n]);
            }
            Op::SumSquares { x } => {
                let d: Vec<f64> = self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                acc(*x, &d);
            }
            Op::DotConst { x, weights } => {
                let d: Vec<f64> = weights.data().iter().map(|w| w * g[0]).collect();
                acc(*x, &d);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = 2.0 * g[0] / av.len() as f64;
                let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                acc(*a, &d);
                if need(*b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    acc(*b, &neg);
                }
            }
            Op::NegLogMean { p, complement } => {
                let pv = self.value(*p).data();
                let k = g[0] / pv.len() as f64;
                let d: Vec<f64> = pv
                    .iter()
                    .map(|&x| {
                        if x <= PROB_CLAMP || x >= 1.0 - PROB_CLAMP {
                            0.0
                        } else if *complement {
                            k / (1.0 - x)
                        } else {
                            -k / x
                        }
                    })
                    .collect();
                acc(*p, &d);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

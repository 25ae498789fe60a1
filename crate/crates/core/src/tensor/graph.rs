use crate::error::{Error, Result};

use super::kernels::{self, gemm, ConvGeom, Layout};
use super::Tensor;

/// Momentum used to fold batch statistics into running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an op defined outside this module.
///
/// Returns one entry per input, `None` for inputs that receive no gradient.
pub trait BackwardRule: Send {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Result<Vec<Option<Vec<f64>>>>;
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch moments and fold them into the running stats.
    Train(&'a mut RunningStats),
    /// Normalize with frozen running stats.
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MulScalar {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    CrossEntropy {
        logp: Var,
        labels: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// Nodes are appended in execution order, which is a topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *acc = Some(g.to_vec()),
    }
}

/// Channel count and per-channel spatial extent of an `[B, C, ...]` shape.
fn channel_layout(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("{op} expects rank ≥ 2, got {shape:?}")));
    }
    let spatial = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Row-wise L2 normalization; rows with norm below `eps` become `e₁`.
/// Returns the normalized values and the original row norms.
pub fn l2_normalize_rows(data: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        let dst = &mut out[r * cols..(r + 1) * cols];
        if norm < eps || !norm.is_finite() {
            if cols > 0 {
                dst[0] = 1.0;
            }
        } else {
            dst.iter_mut().zip(row).for_each(|(d, v)| *d = v / norm);
        }
    }
    (out, norms)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it takes part in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf copy of a trainable tensor with gradient tracking on.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut t = value.clone();
        t.clear_grad();
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a `requires_grad` node by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::row_major(k, n),
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        check_finite(&t, "matmul")?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        check_finite(&t, "add")?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        check_finite(&t, "mul")?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// `x[B×N] + bias[N]`, broadcasting over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape(format!("add_bias of {sx:?} and {sb:?}")));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        check_finite(&t, "add_bias")?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        check_finite(&t, "mul_scalar")?;
        Ok(self.push(t, Op::MulScalar { x, c }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Relu { x }, &[x]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let t = Tensor::scalar(total);
        check_finite(&t, "sum")?;
        Ok(self.push(t, Op::Sum { x }, &[x]))
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[F×C×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let cols = geom.im2col(self.value(x).data());
        let n = geom.columns();
        let mut out = vec![0.0; geom.filters * n];
        gemm(
            self.value(w).data(),
            Layout::row_major(geom.filters, geom.patch_len()),
            &cols,
            Layout::row_major(geom.patch_len(), n),
            &mut out,
            0.0,
        );
        let data = kernels::filters_major_to_batch_major(&out, geom.batch, geom.filters, geom.out_spatial());
        let t = Tensor::new(vec![geom.batch, geom.filters, geom.out_height, geom.out_width], data)?;
        check_finite(&t, "conv2d")?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Mean over all trailing (spatial) dims: `[B×C×…]` → `[B×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = channel_layout(&shape, "global_avg_pool")?;
        if s == 0 {
            return Err(Error::Shape("global_avg_pool over empty spatial extent".into()));
        }
        let src = self.value(x).data();
        let data = (0..b * c)
            .map(|i| src[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        let t = Tensor::new(vec![b, c], data)?;
        Ok(self.push(t, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Row-wise log-softmax of a `[B×K]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::Shape(format!("log_softmax expects [B×K], got {shape:?}")));
        }
        let k = shape[1];
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(shape, data)?;
        check_finite(&t, "log_softmax")?;
        Ok(self.push(t, Op::LogSoftmax { x }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn cross_entropy(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logp).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy of {shape:?} with {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let lp = self.value(logp).data();
        let loss = -labels.iter().enumerate().map(|(i, &l)| lp[i * k + l]).sum::<f64>() / labels.len() as f64;
        let t = Tensor::scalar(loss);
        check_finite(&t, "cross_entropy")?;
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logp,
                labels: labels.to_vec(),
            },
            &[logp],
        ))
    }

    fn affine_params(&self, gamma: Var, beta: Var, channels: usize, op: &str) -> Result<()> {
        let (sg, sb) = (self.value(gamma).shape(), self.value(beta).shape());
        if sg != [channels] || sb != [channels] {
            return Err(Error::Shape(format!(
                "{op} affine params {sg:?}/{sb:?} for {channels} channels"
            )));
        }
        Ok(())
    }

    /// Per-channel standardization over batch and trailing dims.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: BatchNormMode<'_>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = channel_layout(&shape, "batch_norm")?;
        self.affine_params(gamma, beta, c, "batch_norm")?;
        let src = self.value(x).data();
        let count = (b * s) as f64;
        let (mean, var, train) = match mode {
            BatchNormMode::Train(running) => {
                if b < 2 {
                    return Err(Error::BatchTooSmall { got: b, need: 2 });
                }
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::Shape("running stats channel count".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..b {
                        acc += src[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    let m = acc / count;
                    let mut sq = 0.0;
                    for i in 0..b {
                        sq += src[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                    // running variance tracks the unbiased estimate
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { 0.0 };
                    running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * m;
                    running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * unbiased;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval(running) => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::Shape("running stats channel count".into()));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    let h = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        check_finite(&t, "batch_norm")?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-sample standardization over all non-batch dims, with a
    /// per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = channel_layout(&shape, "layer_norm")?;
        self.affine_params(gamma, beta, c, "layer_norm")?;
        let src = self.value(x).data();
        let per = c * s;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; b];
        for i in 0..b {
            let row = &src[i * per..(i + 1) * per];
            let m = row.iter().sum::<f64>() / per as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[i] = is;
            for (j, &val) in row.iter().enumerate() {
                let h = (val - m) * is;
                let ch = j / s;
                xhat[i * per + j] = h;
                out[i * per + j] = g[ch] * h + bt[ch];
            }
        }
        let t = Tensor::new(shape, out)?;
        check_finite(&t, "layer_norm")?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Projects each row of `[N×D]` onto the unit sphere; rows with norm
    /// below `eps` map to `e₁` and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("l2_normalize expects [N×D], got {shape:?}")));
        }
        let (out, norms) = l2_normalize_rows(self.value(x).data(), shape[0], shape[1], eps);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms, eps }, &[x]))
    }

    /// Records an externally computed output with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Result<Var> {
        check_finite(&output, "custom op")?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradient
    /// slot of every `requires_grad` node it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, d: &[f64]| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        g,
                        Layout::row_major(m, n),
                        val(*b).data(),
                        Layout::transposed(k, n),
                        &mut da,
                        0.0,
                    );
                    send(*a, &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        val(*a).data(),
                        Layout::transposed(m, k),
                        g,
                        Layout::row_major(m, n),
                        &mut db,
                        0.0,
                    );
                    send(*b, &db);
                }
            }
            Op::Add { a, b } => {
                send(*a, g);
                send(*b, g);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                send(*a, &da);
                send(*b, &db);
            }
            Op::AddBias { x, bias } => {
                send(*x, g);
                let n = val(*bias).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*bias, &db);
            }
            Op::MulScalar { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                send(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; val(*x).numel()];
                send(*x, &dx);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let gm = kernels::batch_major_to_filters_major(g, geom.batch, geom.filters, geom.out_spatial());
                let n = geom.columns();
                if wants(*w) {
                    let mut dw = vec![0.0; geom.filters * geom.patch_len()];
                    gemm(
                        &gm,
                        Layout::row_major(geom.filters, n),
                        cols,
                        Layout::transposed(geom.patch_len(), n),
                        &mut dw,
                        0.0,
                    );
                    send(*w, &dw);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; geom.patch_len() * n];
                    gemm(
                        val(*w).data(),
                        Layout::transposed(geom.filters, geom.patch_len()),
                        &gm,
                        Layout::row_major(geom.filters, n),
                        &mut dcols,
                        0.0,
                    );
                    send(*x, &geom.col2im(&dcols));
                }
            }
            Op::GlobalAvgPool { x } => {
                let n = val(*x).numel();
                let s = n / g.len();
                let dx: Vec<f64> = (0..n).map(|j| g[j / s] / s as f64).collect();
                send(*x, &dx);
            }
            Op::LogSoftmax { x } => {
                let out = node.value.data();
                let k = node.value.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((d, o), gr) in dx.chunks_mut(k).zip(out.chunks(k)).zip(g.chunks(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        d[j] = gr[j] - o[j].exp() * total;
                    }
                }
                send(*x, &dx);
            }
            Op::CrossEntropy { logp, labels } => {
                let k = val(*logp).shape()[1];
                let mut dx = vec![0.0; val(*logp).numel()];
                let scale = g[0] / labels.len() as f64;
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] = -scale;
                }
                send(*logp, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, s) = channel_layout(val(*x).shape(), "batch_norm")?;
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..b {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                let count = (b * s) as f64;
                for i in 0..b {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            dx[j] = if *train {
                                gm[ch] * inv_std[ch] / count * (count * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                gm[ch] * inv_std[ch] * g[j]
                            };
                        }
                    }
                }
                send(*x, &dx);
                send(*gamma, &dgamma);
                send(*beta, &dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, s) = channel_layout(val(*x).shape(), "layer_norm")?;
                let gm = val(*gamma).data();
                let per = c * s;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for i in 0..b {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..per {
                        let idx = i * per + j;
                        let ch = j / s;
                        dgamma[ch] += g[idx] * xhat[idx];
                        dbeta[ch] += g[idx];
                        let d = g[idx] * gm[ch];
                        sum_d += d;
                        sum_dh += d * xhat[idx];
                    }
                    let n = per as f64;
                    for j in 0..per {
                        let idx = i * per + j;
                        let d = g[idx] * gm[j / s];
                        dx[idx] = inv_std[i] / n * (n * d - sum_d - xhat[idx] * sum_dh);
                    }
                }
                send(*x, &dx);
                send(*gamma, &dgamma);
                send(*beta, &dbeta);
            }
            Op::L2Normalize { x, norms, eps } => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < *eps || !norm.is_finite() {
                        continue;
                    }
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                send(*x, &dx);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let outs = rule.backward(&ins, &node.value, g)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom backward returned {} gradients for {} inputs",
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        if d.len() != val(*v).numel() {
                            return Err(Error::Shape("custom backward gradient length".into()));
                        }
                        send(*v, &d);
                    }
                }
            }
        }
        Ok(())
    }
}

//! Reverse-mode autodiff over a linear tape. Every forward operation appends
//! a node holding its output value plus the context its backward rule needs;
//! `backward` walks the nodes once in reverse and accumulates gradients into
//! each node's tensor. Node ids are plain indices, so a `Var` is Copy and the
//! graph order is explicit.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{strides_for, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batchnorm layer, updated as a side effect of
/// train-mode forward passes (they are buffers, not tape nodes).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct BnCtx {
    train: bool,
    eps: f64,
    /// Statistics used for normalization: batch stats in train mode, the
    /// layer's running stats in eval mode.
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { x: Var, k: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Reshape { x: Var },
    Transpose2d { x: Var },
    Matmul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, kernel: Var, dims: ConvDims },
    GlobalAvgPool { x: Var },
    MeanChannels { x: Var },
    MaxChannels { x: Var, argmax: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    SliceChannels { x: Var, start: usize, len: usize },
    RepeatChannels { x: Var, times: usize },
    ConcatZeroFill { blocks: Vec<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, ctx: BnCtx },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, softmax: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input node. Gradient flows into it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires)
    }

    /// Register a constant input regardless of the tensor's own flag.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(lhs), self.shape(rhs))?;
        let data = zip_broadcast_values(
            self.value(lhs),
            self.value(rhs),
            &out_shape,
            |a, b| a + b,
        );
        let requires = self.wants(lhs) || self.wants(rhs);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Add { lhs, rhs },
            requires,
        ))
    }

    /// Elementwise (Hadamard) product with right-aligned broadcasting.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(lhs), self.shape(rhs))?;
        let data = zip_broadcast_values(
            self.value(lhs),
            self.value(rhs),
            &out_shape,
            |a, b| a * b,
        );
        let requires = self.wants(lhs) || self.wants(rhs);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Mul { lhs, rhs },
            requires,
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * k).collect();
        let shape = t.shape().to_vec();
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Scale { x, k }, requires))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Relu { x }, requires))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Sigmoid { x }, requires))
    }

    // ---- shape handling --------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::LengthMismatch {
                context: "reshape".into(),
                shape: shape.to_vec(),
                len: t.numel(),
            });
        }
        let data = t.data().to_vec();
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Reshape { x }, requires))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "transpose2d expects a matrix".into(),
                expected: vec![0, 0],
                got: t.shape().to_vec(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = kernels::transpose(t.data(), r, c);
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(&[c, r], data)?, Op::Transpose2d { x }, requires))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Config(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    context: "concat".into(),
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut col_off = 0;
        for &v in xs {
            let t = self.value(v);
            let a = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * a * inner..][..a * inner];
                let dst = &mut data[(o * axis_total + col_off) * inner..][..a * inner];
                dst.copy_from_slice(src);
            }
            col_off += a;
        }
        let requires = xs.iter().any(|&v| self.wants(v));
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Concat { xs: xs.to_vec(), axis },
            requires,
        ))
    }

    /// Side-by-side concatenation over the last two dimensions with zero fill:
    /// blocks of shapes [.., r_i, c_i] land at column offsets, shorter blocks
    /// leave zeros beneath them. Output is [.., max r_i, sum c_i].
    pub fn concat_zero_fill(&mut self, blocks: &[Var]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(Error::Config("zero-fill concat of zero blocks".into()));
        }
        let first = self.shape(blocks[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::ShapeMismatch {
                context: "concat_zero_fill expects rank >= 2".into(),
                expected: vec![0, 0],
                got: first,
            });
        }
        let lead = &first[..first.len() - 2];
        let mut max_rows = 0;
        let mut total_cols = 0;
        for &v in blocks {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 2] != lead {
                return Err(Error::ShapeMismatch {
                    context: "concat_zero_fill leading dims".into(),
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            max_rows = max_rows.max(s[s.len() - 2]);
            total_cols += s[s.len() - 1];
        }
        let lead_n: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(max_rows);
        out_shape.push(total_cols);
        let mut data = vec![0.0; lead_n * max_rows * total_cols];
        let mut col_off = 0;
        for &v in blocks {
            let t = self.value(v);
            let (r, c) = block_rc(t.shape());
            for l in 0..lead_n {
                for row in 0..r {
                    let src = &t.data()[(l * r + row) * c..][..c];
                    let dst =
                        &mut data[(l * max_rows + row) * total_cols + col_off..][..c];
                    dst.copy_from_slice(src);
                }
            }
            col_off += c;
        }
        let requires = blocks.iter().any(|&v| self.wants(v));
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::ConcatZeroFill { blocks: blocks.to_vec() },
            requires,
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || start + len > t.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: format!("slice_channels [{start}, {})", start + len),
                expected: t.shape().to_vec(),
                got: vec![start, len],
            });
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let mut out_shape = t.shape().to_vec();
        out_shape[1] = len;
        let mut data = vec![0.0; b * len * inner];
        for bi in 0..b {
            let src = &t.data()[(bi * c + start) * inner..][..len * inner];
            data[bi * len * inner..][..len * inner].copy_from_slice(src);
        }
        let requires = self.wants(x);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::SliceChannels { x, start, len },
            requires,
        ))
    }

    /// Repeat each channel `times` times in place: out channel c reads input
    /// channel c / times.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || times == 0 {
            return Err(Error::Config("repeat_channels needs rank >= 2 and times >= 1".into()));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let mut out_shape = t.shape().to_vec();
        out_shape[1] = c * times;
        let mut data = vec![0.0; b * c * times * inner];
        for bi in 0..b {
            for ci in 0..c {
                let src = &t.data()[(bi * c + ci) * inner..][..inner];
                for rep in 0..times {
                    let oc = ci * times + rep;
                    data[(bi * c * times + oc) * inner..][..inner].copy_from_slice(src);
                }
            }
        }
        let requires = self.wants(x);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::RepeatChannels { x, times },
            requires,
        ))
    }

    // ---- reductions ------------------------------------------------------

    /// [B,C,H,W] -> [B,C], mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "global_avg_pool expects [B,C,H,W]".into(),
                expected: vec![0; 4],
                got: t.shape().to_vec(),
            });
        }
        let (b, c, h, w) = shape4(t.shape());
        let hw = h * w;
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            let plane = &t.data()[i * hw..][..hw];
            data[i] = plane.iter().sum::<f64>() / hw as f64;
        }
        let requires = self.wants(x);
        Ok(self.push(Tensor::from_vec(&[b, c], data)?, Op::GlobalAvgPool { x }, requires))
    }

    /// [B,K,h,w] -> [B,1,h,w], mean across channels at every position.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, k, h, w) = shape4(t.shape());
        let inner = h * w;
        let mut data = vec![0.0; b * inner];
        for bi in 0..b {
            for ki in 0..k {
                let src = &t.data()[(bi * k + ki) * inner..][..inner];
                let dst = &mut data[bi * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / k as f64;
        for v in data.iter_mut() {
            *v *= inv;
        }
        let requires = self.wants(x);
        Ok(self.push(
            Tensor::from_vec(&[b, 1, h, w], data)?,
            Op::MeanChannels { x },
            requires,
        ))
    }

    /// [B,K,h,w] -> [B,1,h,w], max across channels; gradient routes to the
    /// first channel attaining the max.
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, k, h, w) = shape4(t.shape());
        let inner = h * w;
        let mut data = vec![f64::NEG_INFINITY; b * inner];
        let mut argmax = vec![0usize; b * inner];
        for bi in 0..b {
            for ki in 0..k {
                let src = &t.data()[(bi * k + ki) * inner..][..inner];
                for (p, &s) in src.iter().enumerate() {
                    let slot = bi * inner + p;
                    if s > data[slot] {
                        data[slot] = s;
                        argmax[slot] = ki;
                    }
                }
            }
        }
        let requires = self.wants(x);
        Ok(self.push(
            Tensor::from_vec(&[b, 1, h, w], data)?,
            Op::MaxChannels { x, argmax },
            requires,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let requires = self.wants(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, requires))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "matmul".into(),
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let requires = self.wants(lhs) || self.wants(rhs);
        Ok(self.push(
            Tensor::from_vec(&[m, n], data)?,
            Op::Matmul { lhs, rhs, m, k, n },
            requires,
        ))
    }

    /// x [B,in] * w^T + bias, with w stored [out,in].
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let wt = self.transpose2d(w)?;
        let y = self.matmul(x, wt)?;
        self.add(y, bias)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Config("conv2d stride and dilation must be >= 1".into()));
        }
        let (it, kt) = (self.value(input), self.value(kernel));
        if it.rank() != 4 || kt.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "conv2d expects input [B,Ci,H,W] and kernel [Co,Ci,a,b]".into(),
                expected: it.shape().to_vec(),
                got: kt.shape().to_vec(),
            });
        }
        let (batch, ci, h, w) = shape4(it.shape());
        let (co, kci, kr, kc) = shape4(kt.shape());
        if ci != kci {
            return Err(Error::ShapeMismatch {
                context: "conv2d channel agreement".into(),
                expected: vec![ci],
                got: vec![kci],
            });
        }
        let out_rows = ConvDims::out_extent(h, kr, stride, dilation, padding);
        let out_cols = ConvDims::out_extent(w, kc, stride, dilation, padding);
        let (out_rows, out_cols) = match (out_rows, out_cols) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::KernelTooLarge {
                    extent_rows: ConvDims::effective_extent(kr, dilation),
                    extent_cols: ConvDims::effective_extent(kc, dilation),
                    input_rows: h + 2 * padding,
                    input_cols: w + 2 * padding,
                })
            }
        };
        let dims = ConvDims {
            batch,
            in_channels: ci,
            in_rows: h,
            in_cols: w,
            out_channels: co,
            kernel_rows: kr,
            kernel_cols: kc,
            stride,
            dilation,
            padding,
            out_rows,
            out_cols,
        };
        let data = kernels::conv2d_forward(it.data(), kt.data(), &dims);
        let requires = self.wants(input) || self.wants(kernel);
        Ok(self.push(
            Tensor::from_vec(&[batch, co, out_rows, out_cols], data)?,
            Op::Conv2d { input, kernel, dims },
            requires,
        ))
    }

    /// Per-output-channel bias added to a conv result.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[1];
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                context: "add_channel_bias".into(),
                expected: vec![c],
                got: self.shape(bias).to_vec(),
            });
        }
        let b4 = self.reshape(bias, &[c, 1, 1])?;
        self.add(x, b4)
    }

    /// u [B,C,H,W] scaled per channel by gates s [B,C].
    pub fn scale_channels(&mut self, u: Var, s: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let ss = self.shape(s).to_vec();
        if us.len() != 4 || ss.len() != 2 || us[0] != ss[0] || us[1] != ss[1] {
            return Err(Error::ShapeMismatch {
                context: "scale_channels expects u [B,C,H,W], s [B,C]".into(),
                expected: us,
                got: ss,
            });
        }
        let s4 = self.reshape(s, &[ss[0], ss[1], 1, 1])?;
        self.mul(u, s4)
    }

    // ---- normalization & loss ---------------------------------------------

    /// Batch normalization over [B,C,H,W] with per-channel statistics across
    /// (B,H,W). Train mode uses batch statistics and, when `running` is given,
    /// folds them into the running buffers as
    /// running = momentum * running + (1 - momentum) * batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: Option<&mut RunningStats>,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "batchnorm expects [B,C,H,W]".into(),
                expected: vec![0; 4],
                got: t.shape().to_vec(),
            });
        }
        let (b, c, h, w) = shape4(t.shape());
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                context: "batchnorm affine params".into(),
                expected: vec![c],
                got: self.shape(gamma).to_vec(),
            });
        }
        let n = b * h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let plane = &t.data()[((bi * c) + ci) * h * w..][..h * w];
                        acc += plane.iter().sum::<f64>();
                    }
                    let m = acc / n as f64;
                    let mut vacc = 0.0;
                    for bi in 0..b {
                        let plane = &t.data()[((bi * c) + ci) * h * w..][..h * w];
                        for &v in plane {
                            let d = v - m;
                            vacc += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = vacc / n as f64;
                }
                if let Some(stats) = running {
                    for ci in 0..c {
                        // Unbiased variance feeds the running buffer, the
                        // biased one normalizes the batch.
                        let rvar = if n > 1 {
                            var[ci] * n as f64 / (n as f64 - 1.0)
                        } else {
                            var[ci]
                        };
                        stats.mean[ci] = momentum * stats.mean[ci] + (1.0 - momentum) * mean[ci];
                        stats.var[ci] = momentum * stats.var[ci] + (1.0 - momentum) * rvar;
                    }
                }
                (mean, var)
            }
            Mode::Eval => {
                let stats = running.ok_or_else(|| {
                    Error::Config("batchnorm in eval mode needs running statistics".into())
                })?;
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let t = self.value(x);
        let mut data = vec![0.0; t.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let src = &t.data()[((bi * c) + ci) * h * w..][..h * w];
                let dst = &mut data[((bi * c) + ci) * h * w..][..h * w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = gamma_v[ci] * (v - mean[ci]) * inv + beta_v[ci];
                }
            }
        }
        let requires = self.wants(x) || self.wants(gamma) || self.wants(beta);
        let ctx = BnCtx { train: matches!(mode, Mode::Train), eps, mean, var };
        Ok(self.push(
            Tensor::from_vec(&[b, c, h, w], data)?,
            Op::BatchNorm { x, gamma, beta, ctx },
            requires,
        ))
    }

    /// Mean softmax cross-entropy over the batch; logits [B,K].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy logits [B,K] with B labels".into(),
                expected: vec![labels.len(), 0],
                got: t.shape().to_vec(),
            });
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::LabelOutOfRange { index: i, label: l, classes: k });
            }
        }
        let mut softmax = vec![0.0; b * k];
        let mut total = 0.0;
        for bi in 0..b {
            let row = &t.data()[bi * k..][..k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            for (j, &v) in row.iter().enumerate() {
                softmax[bi * k + j] = (v - lse).exp();
            }
            total += lse - row[labels[bi]];
        }
        let loss = total / b as f64;
        let requires = self.wants(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), softmax },
            requires,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. The tape is consumed: a second call
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.value.requires_grad || node.value.grad.is_none() {
                continue;
            }
            let g = node.value.grad.as_deref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Add { lhs, rhs } => {
                    let out_shape = node.value.shape();
                    for &(v, _other) in &[(*lhs, *rhs), (*rhs, *lhs)] {
                        if before[v.0].value.requires_grad {
                            let d = reduce_to_shape(g, out_shape, before[v.0].value.shape());
                            before[v.0].value.accumulate_grad(&d);
                        }
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let out_shape = node.value.shape().to_vec();
                    let (lv, rv) = (*lhs, *rhs);
                    if before[lv.0].value.requires_grad {
                        let scaled = zip_broadcast(
                            g,
                            &out_shape,
                            before[rv.0].value.data(),
                            before[rv.0].value.shape(),
                            &out_shape,
                            |gv, bv| gv * bv,
                        );
                        let d = reduce_to_shape(&scaled, &out_shape, before[lv.0].value.shape());
                        before[lv.0].value.accumulate_grad(&d);
                    }
                    if before[rv.0].value.requires_grad {
                        let scaled = zip_broadcast(
                            g,
                            &out_shape,
                            before[lv.0].value.data(),
                            before[lv.0].value.shape(),
                            &out_shape,
                            |gv, av| gv * av,
                        );
                        let d = reduce_to_shape(&scaled, &out_shape, before[rv.0].value.shape());
                        before[rv.0].value.accumulate_grad(&d);
                    }
                }
                Op::Scale { x, k } => {
                    if before[x.0].value.requires_grad {
                        let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::Relu { x } => {
                    if before[x.0].value.requires_grad {
                        let d: Vec<f64> = before[x.0]
                            .value
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                            .collect();
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::Sigmoid { x } => {
                    if before[x.0].value.requires_grad {
                        let d: Vec<f64> = node
                            .value
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&y, &gv)| gv * y * (1.0 - y))
                            .collect();
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::Reshape { x } => {
                    if before[x.0].value.requires_grad {
                        before[x.0].value.accumulate_grad(g);
                    }
                }
                Op::Transpose2d { x } => {
                    if before[x.0].value.requires_grad {
                        let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                        let d = kernels::transpose(g, r, c);
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::Matmul { lhs, rhs, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if before[lhs.0].value.requires_grad {
                        let bt = kernels::transpose(before[rhs.0].value.data(), k, n);
                        let d = kernels::matmul(g, &bt, m, n, k);
                        before[lhs.0].value.accumulate_grad(&d);
                    }
                    if before[rhs.0].value.requires_grad {
                        let at = kernels::transpose(before[lhs.0].value.data(), m, k);
                        let d = kernels::matmul(&at, g, k, m, n);
                        before[rhs.0].value.accumulate_grad(&d);
                    }
                }
                Op::Conv2d { input, kernel, dims } => {
                    if before[input.0].value.requires_grad {
                        let d = kernels::conv2d_backward_input(
                            g,
                            before[kernel.0].value.data(),
                            dims,
                        );
                        before[input.0].value.accumulate_grad(&d);
                    }
                    if before[kernel.0].value.requires_grad {
                        let d = kernels::conv2d_backward_kernel(
                            g,
                            before[input.0].value.data(),
                            dims,
                        );
                        before[kernel.0].value.accumulate_grad(&d);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if before[x.0].value.requires_grad {
                        let shape = before[x.0].value.shape();
                        let (b, c, h, w) = shape4(shape);
                        let hw = h * w;
                        let mut d = vec![0.0; b * c * hw];
                        for i in 0..b * c {
                            let gv = g[i] / hw as f64;
                            for v in d[i * hw..][..hw].iter_mut() {
                                *v = gv;
                            }
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::MeanChannels { x } => {
                    if before[x.0].value.requires_grad {
                        let shape = before[x.0].value.shape();
                        let (b, k, h, w) = shape4(shape);
                        let inner = h * w;
                        let inv = 1.0 / k as f64;
                        let mut d = vec![0.0; b * k * inner];
                        for bi in 0..b {
                            for ki in 0..k {
                                let dst = &mut d[(bi * k + ki) * inner..][..inner];
                                let src = &g[bi * inner..][..inner];
                                for (dv, &gv) in dst.iter_mut().zip(src) {
                                    *dv = gv * inv;
                                }
                            }
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::MaxChannels { x, argmax } => {
                    if before[x.0].value.requires_grad {
                        let shape = before[x.0].value.shape();
                        let (b, k, h, w) = shape4(shape);
                        let inner = h * w;
                        let mut d = vec![0.0; b * k * inner];
                        for bi in 0..b {
                            for p in 0..inner {
                                let slot = bi * inner + p;
                                d[(bi * k + argmax[slot]) * inner + p] = g[slot];
                            }
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::Concat { xs, axis } => {
                    let out_shape = node.value.shape().to_vec();
                    let axis = *axis;
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut col_off = 0;
                    for &v in xs {
                        let a = before[v.0].value.shape()[axis];
                        if before[v.0].value.requires_grad {
                            let mut d = vec![0.0; outer * a * inner];
                            for o in 0..outer {
                                let src = &g[(o * total + col_off) * inner..][..a * inner];
                                d[o * a * inner..][..a * inner].copy_from_slice(src);
                            }
                            before[v.0].value.accumulate_grad(&d);
                        }
                        col_off += a;
                    }
                }
                Op::SliceChannels { x, start, len } => {
                    if before[x.0].value.requires_grad {
                        let shape = before[x.0].value.shape();
                        let (b, c) = (shape[0], shape[1]);
                        let inner: usize = shape[2..].iter().product();
                        let mut d = vec![0.0; b * c * inner];
                        for bi in 0..b {
                            let dst = &mut d[(bi * c + start) * inner..][..len * inner];
                            dst.copy_from_slice(&g[bi * len * inner..][..len * inner]);
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::RepeatChannels { x, times } => {
                    if before[x.0].value.requires_grad {
                        let shape = before[x.0].value.shape();
                        let (b, c) = (shape[0], shape[1]);
                        let inner: usize = shape[2..].iter().product();
                        let mut d = vec![0.0; b * c * inner];
                        for bi in 0..b {
                            for ci in 0..c {
                                let dst = &mut d[(bi * c + ci) * inner..][..inner];
                                for rep in 0..*times {
                                    let oc = ci * times + rep;
                                    let src = &g[(bi * c * times + oc) * inner..][..inner];
                                    for (dv, &gv) in dst.iter_mut().zip(src) {
                                        *dv += gv;
                                    }
                                }
                            }
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::ConcatZeroFill { blocks } => {
                    let out_shape = node.value.shape().to_vec();
                    let (max_rows, total_cols) = block_rc(&out_shape);
                    let lead_n: usize =
                        out_shape[..out_shape.len() - 2].iter().product();
                    let mut col_off = 0;
                    for &v in blocks {
                        let (r, c) = block_rc(before[v.0].value.shape());
                        if before[v.0].value.requires_grad {
                            let mut d = vec![0.0; lead_n * r * c];
                            for l in 0..lead_n {
                                for row in 0..r {
                                    let src = &g
                                        [(l * max_rows + row) * total_cols + col_off..][..c];
                                    d[(l * r + row) * c..][..c].copy_from_slice(src);
                                }
                            }
                            before[v.0].value.accumulate_grad(&d);
                        }
                        col_off += c;
                    }
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let (b, c, h, w) = shape4(before[x.0].value.shape());
                    let n = (b * h * w) as f64;
                    let hw = h * w;
                    let x_data = before[x.0].value.data();
                    let gamma_v = before[gamma.0].value.data();
                    // Per-channel reductions of g and g*xhat.
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let inv = 1.0 / (ctx.var[ci] + ctx.eps).sqrt();
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                let gv = g[base + p];
                                let xh = (x_data[base + p] - ctx.mean[ci]) * inv;
                                sum_g[ci] += gv;
                                sum_gx[ci] += gv * xh;
                            }
                        }
                    }
                    if before[x.0].value.requires_grad {
                        let mut d = vec![0.0; b * c * hw];
                        for bi in 0..b {
                            for ci in 0..c {
                                let inv = 1.0 / (ctx.var[ci] + ctx.eps).sqrt();
                                let base = (bi * c + ci) * hw;
                                let scale = gamma_v[ci] * inv;
                                for p in 0..hw {
                                    let gv = g[base + p];
                                    d[base + p] = if ctx.train {
                                        let xh = (x_data[base + p] - ctx.mean[ci]) * inv;
                                        scale * (gv - sum_g[ci] / n - xh * sum_gx[ci] / n)
                                    } else {
                                        scale * gv
                                    };
                                }
                            }
                        }
                        before[x.0].value.accumulate_grad(&d);
                    }
                    if before[gamma.0].value.requires_grad {
                        before[gamma.0].value.accumulate_grad(&sum_gx);
                    }
                    if before[beta.0].value.requires_grad {
                        before[beta.0].value.accumulate_grad(&sum_g);
                    }
                }
                Op::Sum { x } => {
                    if before[x.0].value.requires_grad {
                        let d = vec![g[0]; before[x.0].value.numel()];
                        before[x.0].value.accumulate_grad(&d);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
                    if before[logits.0].value.requires_grad {
                        let b = labels.len();
                        let k = before[logits.0].value.shape()[1];
                        let scale = g[0] / b as f64;
                        let mut d = softmax.clone();
                        for (bi, &l) in labels.iter().enumerate() {
                            d[bi * k + l] -= 1.0;
                        }
                        for v in d.iter_mut() {
                            *v *= scale;
                        }
                        before[logits.0].value.accumulate_grad(&d);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    debug_assert_eq!(shape.len(), 4);
    (shape[0], shape[1], shape[2], shape[3])
}

fn block_rc(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

/// Right-aligned broadcast of two shapes (size-1 dimensions stretch).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ad == bd || ad == 1 || bd == 1 {
            out[i] = ad.max(bd);
        } else {
            return Err(Error::BroadcastMismatch { lhs: a.to_vec(), rhs: b.to_vec() });
        }
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape` (zero where a
/// dimension stretches).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let base = strides_for(shape);
    let mut st = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        st[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    st
}

fn zip_broadcast_values(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64 + Copy,
) -> Vec<f64> {
    zip_broadcast(a.data(), a.shape(), b.data(), b.shape(), out_shape, f)
}

fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64 + Copy,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    // Fast path: identical layouts.
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(numel);
    let a_st = broadcast_strides(a_shape, out_shape);
    let b_st = broadcast_strides(b_shape, out_shape);
    fn rec(
        dim: usize,
        a_off: usize,
        b_off: usize,
        out: &mut Vec<f64>,
        a: &[f64],
        b: &[f64],
        a_st: &[usize],
        b_st: &[usize],
        out_shape: &[usize],
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) {
        if out_shape.is_empty() {
            out.push(f(a[a_off], b[b_off]));
            return;
        }
        if dim == out_shape.len() - 1 {
            let (asd, bsd) = (a_st[dim], b_st[dim]);
            for j in 0..out_shape[dim] {
                out.push(f(a[a_off + j * asd], b[b_off + j * bsd]));
            }
            return;
        }
        for j in 0..out_shape[dim] {
            rec(
                dim + 1,
                a_off + j * a_st[dim],
                b_off + j * b_st[dim],
                out,
                a,
                b,
                a_st,
                b_st,
                out_shape,
                f,
            );
        }
    }
    rec(0, 0, 0, &mut out, a, b, &a_st, &b_st, out_shape, f);
    out
}

/// Sum `grad` (laid out as `grad_shape`) down to `target_shape` by collapsing
/// every broadcast dimension.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let t_st = broadcast_strides(target_shape, grad_shape);
    let numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel];
    let g_st = strides_for(grad_shape);
    // Walk every grad element, route it to its target slot.
    let rank = grad_shape.len();
    for (gi, &gv) in grad.iter().enumerate() {
        let mut rem = gi;
        let mut t_off = 0;
        for d in 0..rank {
            let id = rem / g_st[d];
            rem %= g_st[d];
            t_off += id * t_st[d];
        }
        out[t_off] += gv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(t: Tensor) -> Tensor {
        t.with_grad()
    }

    #[test]
    fn add_broadcasts_bias_over_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[3], vec![10., 20., 30.]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn broadcast_grad_reduces_to_operand_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_grad(Tensor::ones(&[2, 3])));
        let b = tape.leaf(leaf_grad(Tensor::from_vec(&[3], vec![1., 2., 3.]).unwrap()));
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn hadamard_with_unit_gates_is_identity() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap());
        let s = tape.leaf(Tensor::ones(&[1, 3]));
        let y = tape.scale_channels(u, s).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(u).data());
    }

    #[test]
    fn relu_and_sigmoid_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-3.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.5);
    }

    #[test]
    fn relu_gradient_is_zero_left_of_origin() {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_grad(Tensor::from_vec(&[2], vec![-3.0, 2.0]).unwrap()));
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_grad(Tensor::ones(&[2])));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::TapeConsumed));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_grad(Tensor::ones(&[2])));
        let y = tape.relu(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn matmul_gradients_match_transposed_products() {
        let mut tape = Tape::new();
        let a = tape.leaf(leaf_grad(
            Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap(),
        ));
        let b = tape.leaf(leaf_grad(
            Tensor::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap(),
        ));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        // dA = 1 * B^T, dB = A^T * 1
        assert_eq!(tape.grad(a).unwrap(), &[11., 15., 11., 15.]);
        assert_eq!(tape.grad(b).unwrap(), &[4., 4., 6., 6.]);
    }

    #[test]
    fn conv_kernel_too_large_names_both_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let err = tape.conv2d(x, k, 1, 1, 0).unwrap_err();
        match err {
            Error::KernelTooLarge { extent_rows, input_rows, .. } => {
                assert_eq!(extent_rows, 3);
                assert_eq!(input_rows, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn global_avg_pool_means_planes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2, 2, 2], vec![1., 2., 3., 4., 10., 10., 10., 10.]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 10.0]);
    }

    #[test]
    fn concat_zero_fill_places_blocks_and_zeros() {
        // blocks 3x1, 2x2, 1x3 -> 3x6 with zeros under the short blocks
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[3, 1], vec![1., 2., 3.]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![4., 5., 6., 7.]).unwrap());
        let c = tape.leaf(Tensor::from_vec(&[1, 3], vec![8., 9., 10.]).unwrap());
        let out = tape.concat_zero_fill(&[a, b, c]).unwrap();
        assert_eq!(tape.shape(out), &[3, 6]);
        #[rustfmt::skip]
        let expected = vec![
            1., 4., 5., 8., 9., 10.,
            2., 6., 7., 0., 0., 0.,
            3., 0., 0., 0., 0., 0.,
        ];
        assert_eq!(tape.value(out).data(), &expected[..]);
    }

    #[test]
    fn concat_zero_fill_grad_skips_filled_cells() {
        let mut tape = Tape::new();
        let a = tape.leaf(leaf_grad(Tensor::from_vec(&[2, 1], vec![1., 2.]).unwrap()));
        let b = tape.leaf(leaf_grad(Tensor::from_vec(&[1, 1], vec![3.]).unwrap()));
        let out = tape.concat_zero_fill(&[a, b]).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn max_channels_routes_gradient_to_first_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_grad(
            Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, 1.0, 3.0, 2.0]).unwrap(),
        ));
        let y = tape.max_channels(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        // Tie at position 0 -> gradient to channel 0 only.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_matches_direct_formula() {
        let mut tape = Tape::new();
        let logits = tape.leaf(leaf_grad(
            Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
        ));
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        let denom: f64 = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((tape.value(loss).scalar_value() - (denom - 3.0)).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        let z: f64 = 1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp();
        assert!((g[0] - 1.0f64.exp() / z).abs() < 1e-12);
        assert!((g[2] - (3.0f64.exp() / z - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_standardizes_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.leaf(Tensor::ones(&[1]));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let y = tape
            .batchnorm(x, gamma, beta, Mode::Train, None, 0.9, 1e-5)
            .unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_eval_uses_initial_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![0.25, -0.5]).unwrap());
        let gamma = tape.leaf(Tensor::ones(&[1]));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let mut stats = RunningStats { mean: vec![0.0], var: vec![1.0] };
        let y = tape
            .batchnorm(x, gamma, beta, Mode::Eval, Some(&mut stats), 0.9, 1e-5)
            .unwrap();
        let out = tape.value(y).data();
        // (x - 0) / sqrt(1 + eps): close to the input but scaled by ~1/sqrt(1+1e-5)
        assert!((out[0] - 0.25 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((out[1] + 0.5 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }
}

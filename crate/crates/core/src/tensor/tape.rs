use std::fmt;
use std::str::FromStr;

use super::kernels::{self, AxisLayout, ConvGeometry};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Hardswish,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Hardswish => kernels::hardswish(x),
        }
    }

    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Hardswish => kernels::hardswish_grad(x),
        }
    }
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "hardswish" => Ok(Activation::Hardswish),
            other => Err(TensorError::invalid(
                "activation",
                format!("unknown activation kind {other:?}"),
            )),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Hardswish => "hardswish",
        };
        f.write_str(s)
    }
}

enum Op {
    Leaf,
    Binary { kind: BinaryOp, a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Offset { x: Var },
    MatMul { a: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Sum { x: Var },
    MeanAxis { x: Var, axis: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    AvgPool { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f32>, inv_std: Vec<f32> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    Index { x: Var, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of primitive operations.
///
/// Policy: [`Tape::backward`] consumes the record. Values and gradients stay
/// readable, but further recording or a second backward is an error until
/// [`Tape::reset`] is called.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that never records gradient information; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        check_finite(op, value.data())?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { node_op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        check_finite("leaf", t.data())?;
        let requires_grad = self.grad_enabled && t.requires_grad();
        t.set_requires_grad(false);
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
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

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        if kind == BinaryOp::Div && self.data(b).iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let f: fn(f32, f32) -> f32 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = kernels::broadcast_binary(self.data(a), &sa, self.data(b), &sb, &out_shape, f);
        let t = Tensor::new(out_shape, data)?;
        self.push(op_name, t, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Elementwise op against a scalar right operand.
    pub fn binary_scalar(&mut self, kind: BinaryOp, x: Var, s: f32) -> Result<Var> {
        match kind {
            BinaryOp::Add => self.offset(x, s),
            BinaryOp::Sub => self.offset(x, -s),
            BinaryOp::Mul => self.scale(x, s),
            BinaryOp::Div => {
                if s == 0.0 {
                    return Err(TensorError::DivisionByZero { op: "div" });
                }
                self.scale(x, 1.0 / s)
            }
        }
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale { x, factor }, &[x])
    }

    pub fn offset(&mut self, x: Var, s: f32) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e + s).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("offset", t, Op::Offset { x }, &[x])
    }

    fn matmul_plan(&self, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize, usize, Vec<(usize, usize)>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let lead = kernels::broadcast_shape(la, lb).ok_or_else(err)?;
        let mut pairs = Vec::with_capacity(numel(&lead));
        kernels::broadcast_visit(la, lb, &lead, |_, ia, ib| pairs.push((ia, ib)));
        let mut out_shape = lead;
        out_shape.extend([m, n]);
        Ok((out_shape, m, k, n, pairs))
    }

    /// Batched matrix product `[..., M, K] · [..., K, N]` with broadcast
    /// leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out_shape, m, k, n, pairs) = self.matmul_plan(a, b)?;
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (self.data(a), self.data(b));
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                n,
                &da[ia * m * k..(ia + 1) * m * k],
                false,
                &db[ib * k * n..(ib + 1) * k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(out_shape, out)?;
        self.push("matmul", t, Op::MatMul { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        self.push("permute", t, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(TensorError::invalid(
                "mean_axis",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let l = AxisLayout::new(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; l.outer * l.inner];
        for o in 0..l.outer {
            for k in 0..l.len {
                let row = &src[(o * l.len + k) * l.inner..(o * l.len + k + 1) * l.inner];
                for (d, v) in out[o * l.inner..(o + 1) * l.inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for v in &mut out {
            *v /= l.len as f32;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        self.push("mean_axis", t, Op::MeanAxis { x, axis }, &[x])
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let in_dim = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&sx) / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        kernels::gemm(rows, in_dim, out_dim, self.data(x), false, self.data(w), false, &mut out, false);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(out_dim) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = out_dim;
        let t = Tensor::new(out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn avg_pool3x3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("avg_pool3x3", format!("expected rank 4, got {s:?}")));
        }
        let out = kernels::avg_pool3x3_forward(self.data(x), s[0] * s[1], s[2], s[3]);
        let t = Tensor::new(s, out)?;
        self.push("avg_pool3x3", t, Op::AvgPool { x }, &[x])
    }

    fn channel_affine_check(&self, op: &'static str, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(())
    }

    /// Training-mode batch norm over axis 1 of `[B, C, ...]`. Returns the
    /// output with the biased batch mean and variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "rank must be at least 2"));
        }
        let (bsz, c) = (s[0], s[1]);
        let spatial = numel(&s[2..]);
        self.channel_affine_check("batch_norm", x, gamma, beta, c)?;
        let (mean, var) = kernels::channel_moments(self.data(x), bsz, c, spatial);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.channel_affine(x, gamma, beta, &mean, &inv_std, bsz, c, spatial);
        let t = Tensor::new(s, out)?;
        let v = self.push(
            "batch_norm",
            t,
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "rank must be at least 2"));
        }
        let (bsz, c) = (s[0], s[1]);
        let spatial = numel(&s[2..]);
        self.channel_affine_check("batch_norm", x, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: s,
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.channel_affine(x, gamma, beta, running_mean, &inv_std, bsz, c, spatial);
        let t = Tensor::new(s, out)?;
        self.push(
            "batch_norm",
            t,
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_affine(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        bsz: usize,
        c: usize,
        spatial: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for n in 0..bsz {
            for ch in 0..c {
                let off = (n * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, out)
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        self.channel_affine_check("layer_norm", x, gamma, beta, c)?;
        let stats = kernels::normalize_groups(self.data(x), c, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<f32> = stats
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % c] * h + b[i % c])
            .collect();
        let t = Tensor::new(s, out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm { x, gamma, beta, xhat: stats.xhat, inv_std: stats.inv_std },
            &[x, gamma, beta],
        )
    }

    /// Group norm over `[B, C, ...]`: statistics per (sample, channel group),
    /// affine per channel.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("group_norm", "rank must be at least 2"));
        }
        let c = s[1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        self.channel_affine_check("group_norm", x, gamma, beta, c)?;
        let spatial = numel(&s[2..]);
        let stats = kernels::normalize_groups(self.data(x), c / groups * spatial, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<f32> = stats
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / spatial) % c;
                g[ch] * h + b[ch]
            })
            .collect();
        let t = Tensor::new(s, out)?;
        self.push(
            "group_norm",
            t,
            Op::GroupNorm { x, gamma, beta, groups, xhat: stats.xhat, inv_std: stats.inv_std },
            &[x, gamma, beta],
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| kind.apply(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("activation", t, Op::Act { x, kind }, &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let out = kernels::softmax_forward(self.data(x), AxisLayout::new(&s, axis));
        let t = Tensor::new(s, out)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for
    /// `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (bsz, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let probs = kernels::softmax_forward(self.data(logits), AxisLayout::new(&s, 1));
        let src = self.data(logits);
        let mut loss = 0.0f64;
        for (n, &l) in labels.iter().enumerate() {
            let row = &src[n * k..(n + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[l] as f64;
        }
        let t = Tensor::scalar((loss / bsz as f64) as f32);
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
            &[logits],
        )
    }

    /// Element `index` (row-major) of `x` as a shape-`[1]` value.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(TensorError::invalid(
                "index",
                format!("index {index} out of range for {} elements", v.len()),
            ));
        }
        let t = Tensor::scalar(v.data()[index]);
        self.push("index", t, Op::Index { x, index }, &[x])
    }

    /// Reverse pass from a scalar `loss`; fills gradients for every value that
    /// depends on a gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.input_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut grads[input.0], contrib);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.consumed = true;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.data(*a), self.data(*b));
                let mut out = Vec::new();
                match kind {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if want(*a) {
                            out.push((*a, kernels::reduce_to_shape(g, out_shape, sa)));
                        }
                        if want(*b) {
                            let mut gb = kernels::reduce_to_shape(g, out_shape, sb);
                            if *kind == BinaryOp::Sub {
                                gb.iter_mut().for_each(|v| *v = -*v);
                            }
                            out.push((*b, gb));
                        }
                    }
                    BinaryOp::Mul | BinaryOp::Div => {
                        let mut ga = vec![0.0; va.len()];
                        let mut gb = vec![0.0; vb.len()];
                        let div = *kind == BinaryOp::Div;
                        kernels::broadcast_visit(sa, sb, out_shape, |o, ia, ib| {
                            if div {
                                ga[ia] += g[o] / vb[ib];
                                gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]);
                            } else {
                                ga[ia] += g[o] * vb[ib];
                                gb[ib] += g[o] * va[ia];
                            }
                        });
                        if want(*a) {
                            out.push((*a, ga));
                        }
                        if want(*b) {
                            out.push((*b, gb));
                        }
                    }
                }
                out
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Offset { x } => vec![(*x, g.to_vec())],
            Op::MatMul { a, b } => {
                let (_, m, k, n, pairs) = self.matmul_plan(*a, *b).expect("recorded matmul");
                let (va, vb) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let ar = ia * m * k..(ia + 1) * m * k;
                    let br = ib * k * n..(ib + 1) * k * n;
                    if want(*a) {
                        kernels::gemm(m, n, k, gc, false, &vb[br.clone()], true, &mut ga[ar.clone()], true);
                    }
                    if want(*b) {
                        kernels::gemm(k, m, n, &va[ar], true, gc, false, &mut gb[br], true);
                    }
                }
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, ga));
                }
                if want(*b) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, axes } => {
                vec![(*x, kernels::permute(g, out_shape, &kernels::inverse_axes(axes)))]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::MeanAxis { x, axis } => {
                let l = AxisLayout::new(self.shape(*x), *axis);
                let mut dx = vec![0.0; self.value(*x).len()];
                let scale = 1.0 / l.len as f32;
                for o in 0..l.outer {
                    let src = &g[o * l.inner..(o + 1) * l.inner];
                    for k in 0..l.len {
                        let at = (o * l.len + k) * l.inner;
                        for (d, s) in dx[at..at + l.inner].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (in_dim, out_dim) = (sw[0], sw[1]);
                let rows = self.value(*x).len() / in_dim;
                let mut out = Vec::new();
                if want(*x) {
                    let mut dx = vec![0.0; rows * in_dim];
                    kernels::gemm(rows, out_dim, in_dim, g, false, self.data(*w), true, &mut dx, false);
                    out.push((*x, dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; in_dim * out_dim];
                    kernels::gemm(in_dim, rows, out_dim, self.data(*x), true, g, false, &mut dw, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut db = vec![0.0; out_dim];
                    for row in g.chunks(out_dim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((b, db));
                }
                out
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_db = b.is_some_and(|b| want(b));
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    want(*x),
                    want(*w),
                    need_db,
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool { x } => {
                let s = self.shape(*x);
                vec![(*x, kernels::avg_pool3x3_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }
            | Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let (bsz, c, spatial) = (s[0], s[1], numel(&s[2..]));
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..bsz {
                    for ch in 0..c {
                        let off = (n * c + ch) * spatial;
                        for i in off..off + spatial {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                if matches!(node.op, Op::BatchNormTrain { .. }) {
                    let m = (bsz * spatial) as f32;
                    for ch in 0..c {
                        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                        let (sd, sdx) = (gm[ch] * dbeta[ch], gm[ch] * dgamma[ch]);
                        for n in 0..bsz {
                            let off = (n * c + ch) * spatial;
                            for i in off..off + spatial {
                                dx[i] = inv_std[ch] / m * (m * g[i] * gm[ch] - sd - xhat[i] * sdx);
                            }
                        }
                    }
                } else {
                    for n in 0..bsz {
                        for ch in 0..c {
                            let off = (n * c + ch) * spatial;
                            for i in off..off + spatial {
                                dx[i] = g[i] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; g.len()];
                for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    dgamma[i % c] += gi * h;
                    dbeta[i % c] += gi;
                    dxhat[i] = gi * gm[i % c];
                }
                let dx = kernels::normalize_groups_backward(xhat, inv_std, &dxhat, c);
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = self.shape(*x);
                let (c, spatial) = (s[1], numel(&s[2..]));
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; g.len()];
                for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / spatial) % c;
                    dgamma[ch] += gi * h;
                    dbeta[ch] += gi;
                    dxhat[i] = gi * gm[ch];
                }
                let dx = kernels::normalize_groups_backward(xhat, inv_std, &dxhat, c / groups * spatial);
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Act { x, kind } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gi, &xi)| gi * kind.derivative(xi))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(node.value.data(), g, AxisLayout::new(out_shape, *axis));
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    dx[n * k + l] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::Index { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*index] = g[0];
                vec![(*x, dx)]
            }
        }
    }
}

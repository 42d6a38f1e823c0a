//! Parameterized layers (convolution, batch/layer/group norm, linear) and
//! the conv-BN folding transform.

use rand::Rng;

use super::params::{shape_err, Graph, Mode, ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::{Activation, Result, Tensor, TensorError, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

/// Affine parameters of a layer or group norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

/// `y = x · weight + bias` with `weight: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// A convolution optionally followed by batch norm. Folding removes the BN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: Option<BnParams>,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// Kaiming fan-out normal weights, zero bias.
    pub fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> ConvParams {
        let std = (2.0 / (c_out * k * k) as f32).sqrt();
        let w = Tensor::randn(&[c_out, c_in, k, k], std, self.rng);
        let weight = self.add("weight", w, ParamKind::Weight);
        let bias = Some(self.add("bias", Tensor::zeros(&[c_out]), ParamKind::NoDecay));
        ConvParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn batchnorm(&mut self, c: usize) -> BnParams {
        BnParams {
            gamma: self.add("gamma", Tensor::ones(&[c]), ParamKind::NoDecay),
            beta: self.add("beta", Tensor::zeros(&[c]), ParamKind::NoDecay),
            running_mean: self.add("running_mean", Tensor::zeros(&[c]), ParamKind::Buffer),
            running_var: self.add("running_var", Tensor::ones(&[c]), ParamKind::Buffer),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn conv_bn(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> ConvBn {
        let conv = self.scoped("conv", |b| b.conv(c_in, c_out, k, stride, padding));
        let bn = self.scoped("bn", |b| b.batchnorm(c_out));
        ConvBn { conv, bn: Some(bn) }
    }

    pub fn norm(&mut self, c: usize) -> NormParams {
        NormParams {
            gamma: self.add("gamma", Tensor::ones(&[c]), ParamKind::NoDecay),
            beta: self.add("beta", Tensor::zeros(&[c]), ParamKind::NoDecay),
            eps: LN_EPS,
        }
    }

    /// Truncated-normal (std 0.02) weight, zero bias.
    pub fn linear(&mut self, d_in: usize, d_out: usize) -> LinearParams {
        let w = Tensor::trunc_normal(&[d_in, d_out], 0.02, self.rng);
        LinearParams {
            weight: self.add("weight", w, ParamKind::Weight),
            bias: Some(self.add("bias", Tensor::zeros(&[d_out]), ParamKind::NoDecay)),
        }
    }
}

pub fn conv2d(g: &mut Graph, x: Var, p: &ConvParams) -> Result<Var> {
    let w = g.param(p.weight)?;
    let b = p.bias.map(|b| g.param(b)).transpose()?;
    g.tape.conv2d(x, w, b, p.stride, p.padding)
}

/// Batch norm over axis 1. In [`Mode::Train`] it normalizes with batch
/// statistics and records the running-statistic update on the graph.
pub fn batchnorm(g: &mut Graph, x: Var, p: &BnParams) -> Result<Var> {
    let c = g.store().get(p.gamma).len();
    let xs = g.tape.shape(x).to_vec();
    if xs.len() < 2 || xs[1] != c {
        return Err(shape_err("batchnorm", &xs, &[c]));
    }
    let gamma = g.param(p.gamma)?;
    let beta = g.param(p.beta)?;
    match g.mode() {
        Mode::Train => {
            let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta, p.eps)?;
            let count = (xs[0] * xs[2..].iter().product::<usize>()) as f32;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let store = g.store();
            let rm = store.get(p.running_mean).data();
            let rv = store.get(p.running_var).data();
            let m = p.momentum;
            let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            g.record_buffer(p.running_mean, new_mean);
            g.record_buffer(p.running_var, new_var);
            Ok(y)
        }
        Mode::Eval => {
            let store = g.store();
            let (rm, rv) = (store.get(p.running_mean).data(), store.get(p.running_var).data());
            g.tape.batch_norm_eval(x, gamma, beta, rm, rv, p.eps)
        }
    }
}

pub fn conv_bn(g: &mut Graph, x: Var, p: &ConvBn) -> Result<Var> {
    let y = conv2d(g, x, &p.conv)?;
    match &p.bn {
        Some(bn) => batchnorm(g, y, bn),
        None => Ok(y),
    }
}

pub fn layernorm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    let gamma = g.param(p.gamma)?;
    let beta = g.param(p.beta)?;
    g.tape.layer_norm(x, gamma, beta, p.eps)
}

pub fn groupnorm(g: &mut Graph, x: Var, groups: usize, p: &NormParams) -> Result<Var> {
    let gamma = g.param(p.gamma)?;
    let beta = g.param(p.beta)?;
    g.tape.group_norm(x, groups, gamma, beta, p.eps)
}

/// Layer norm across channels at every spatial position of `[B, C, H, W]`.
pub fn channel_layernorm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    let t = g.tape.permute(x, &[0, 2, 3, 1])?;
    let n = layernorm(g, t, p)?;
    g.tape.permute(n, &[0, 3, 1, 2])
}

pub fn linear(g: &mut Graph, x: Var, p: &LinearParams) -> Result<Var> {
    let w = g.param(p.weight)?;
    let b = p.bias.map(|b| g.param(b)).transpose()?;
    g.tape.linear(x, w, b)
}

pub fn activation(g: &mut Graph, kind: Activation, x: Var) -> Result<Var> {
    g.tape.activation(kind, x)
}

pub fn avgpool3x3(g: &mut Graph, x: Var) -> Result<Var> {
    g.tape.avg_pool3x3(x)
}

pub fn softmax(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    g.tape.softmax(x, axis)
}

pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.tape.cross_entropy(logits, labels)
}

/// Convolution weights held by value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

/// Batch-norm state held by value.
#[derive(Debug, Clone, PartialEq)]
pub struct BnWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BnWeights {
    pub fn from_store(store: &ParamStore, p: &BnParams) -> Self {
        BnWeights {
            gamma: store.get(p.gamma).detached(),
            beta: store.get(p.beta).detached(),
            running_mean: store.get(p.running_mean).detached(),
            running_var: store.get(p.running_var).detached(),
            eps: p.eps,
        }
    }
}

/// Absorbs inference-mode batch norm into the preceding convolution:
/// `w' = w · γ/√(σ²+ε)` per output channel and `b' = (b − μ) · γ/√(σ²+ε) + β`.
pub fn fold_bn_into_conv(conv: &ConvWeights, bn: &BnWeights) -> Result<ConvWeights> {
    let c_out = conv.weight.shape()[0];
    if bn.gamma.len() != c_out
        || bn.beta.len() != c_out
        || bn.running_mean.len() != c_out
        || bn.running_var.len() != c_out
    {
        return Err(shape_err("fold_bn_into_conv", conv.weight.shape(), bn.gamma.shape()));
    }
    if bn.running_var.data().iter().any(|&v| v < 0.0) {
        return Err(TensorError::invalid("fold_bn_into_conv", "negative running variance"));
    }
    let per_out = conv.weight.len() / c_out;
    let scale: Vec<f32> = bn
        .gamma
        .data()
        .iter()
        .zip(bn.running_var.data())
        .map(|(g, v)| g / (v + bn.eps).sqrt())
        .collect();
    let mut w = conv.weight.detached();
    for (co, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[co]);
    }
    let bias: Vec<f32> = (0..c_out)
        .map(|co| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[co]);
            (b - bn.running_mean.data()[co]) * scale[co] + bn.beta.data()[co]
        })
        .collect();
    Ok(ConvWeights {
        weight: w,
        bias: Some(Tensor::from_vec(bias)),
        stride: conv.stride,
        padding: conv.padding,
    })
}

/// Copies parameters from one store into another, optionally folding BN,
/// while rebuilding module handles.
pub struct Transfer<'a> {
    pub src: &'a ParamStore,
    pub dst: &'a mut ParamStore,
    pub fold_bn: bool,
}

impl Transfer<'_> {
    pub fn copy(&mut self, id: ParamId) -> ParamId {
        let e = self.src.entry(id);
        self.dst.add(e.name.clone(), e.tensor.detached(), e.kind)
    }

    pub fn norm(&mut self, p: &NormParams) -> NormParams {
        NormParams {
            gamma: self.copy(p.gamma),
            beta: self.copy(p.beta),
            eps: p.eps,
        }
    }

    pub fn linear(&mut self, p: &LinearParams) -> LinearParams {
        LinearParams {
            weight: self.copy(p.weight),
            bias: p.bias.map(|b| self.copy(b)),
        }
    }

    pub fn conv(&mut self, p: &ConvParams) -> ConvParams {
        ConvParams {
            weight: self.copy(p.weight),
            bias: p.bias.map(|b| self.copy(b)),
            stride: p.stride,
            padding: p.padding,
        }
    }

    pub fn conv_bn(&mut self, p: &ConvBn) -> Result<ConvBn> {
        match (&p.bn, self.fold_bn) {
            (Some(bn), true) => {
                let cw = ConvWeights {
                    weight: self.src.get(p.conv.weight).detached(),
                    bias: p.conv.bias.map(|b| self.src.get(b).detached()),
                    stride: p.conv.stride,
                    padding: p.conv.padding,
                };
                let folded = fold_bn_into_conv(&cw, &BnWeights::from_store(self.src, bn))?;
                let wname = self.src.entry(p.conv.weight).name.clone();
                let bname = match p.conv.bias {
                    Some(b) => self.src.entry(b).name.clone(),
                    None => wname.replace("weight", "bias"),
                };
                let weight = self.dst.add(wname, folded.weight, ParamKind::Weight);
                let bias = self.dst.add(bname, folded.bias.expect("folded bias"), ParamKind::NoDecay);
                Ok(ConvBn {
                    conv: ConvParams {
                        weight,
                        bias: Some(bias),
                        stride: p.conv.stride,
                        padding: p.conv.padding,
                    },
                    bn: None,
                })
            }
            (bn, _) => Ok(ConvBn {
                conv: self.conv(&p.conv),
                bn: bn.as_ref().map(|bn| BnParams {
                    gamma: self.copy(bn.gamma),
                    beta: self.copy(bn.beta),
                    running_mean: self.copy(bn.running_mean),
                    running_var: self.copy(bn.running_var),
                    eps: bn.eps,
                    momentum: bn.momentum,
                }),
            }),
        }
    }
}

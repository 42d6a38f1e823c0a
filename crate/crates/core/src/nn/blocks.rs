//! Conv stem, stage embeddings and the two MetaBlock flavours.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{mhsa, AttnParams};
use super::layers::{
    activation, avgpool3x3, channel_layernorm, conv_bn, groupnorm, layernorm, linear, ConvBn,
    LinearParams, NormParams, Transfer,
};
use super::params::{shape_err, Graph, ParamBuilder};
use crate::tensor::{Activation, Result, TensorError, Var};

/// Normalization used inside 4D MetaBlocks.
///
/// `Bn` is the conv-BN design (foldable at inference). `Gn` and `Ln` place a
/// group norm (one group) or channel-wise layer norm before the pool mixer and
/// before the MLP instead, with plain convolutions in the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm4d {
    #[default]
    Bn,
    Gn,
    Ln,
}

/// Feature map in one of the two layouts a network passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// `[B, C, H, W]`
    Spatial(Var),
    /// `[B, H·W, C]`, remembering the spatial extent.
    Tokens { x: Var, h: usize, w: usize },
}

impl Feature {
    pub fn var(self) -> Var {
        match self {
            Feature::Spatial(v) | Feature::Tokens { x: v, .. } => v,
        }
    }

    pub fn to_tokens(self, g: &mut Graph) -> Result<Feature> {
        match self {
            Feature::Spatial(x) => {
                let s = g.tape.shape(x).to_vec();
                let t = spatial_to_tokens(g, x)?;
                Ok(Feature::Tokens { x: t, h: s[2], w: s[3] })
            }
            tokens => Ok(tokens),
        }
    }

    pub fn to_spatial(self, g: &mut Graph) -> Result<Feature> {
        match self {
            Feature::Tokens { x, h, w } => Ok(Feature::Spatial(tokens_to_spatial(g, x, h, w)?)),
            spatial => Ok(spatial),
        }
    }
}

/// `[B, C, H, W] → [B, H·W, C]`.
pub fn spatial_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("spatial_to_tokens", &s, &[4]));
    }
    let r = g.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.tape.permute(r, &[0, 2, 1])
}

/// `[B, H·W, C] → [B, C, H, W]`.
pub fn tokens_to_spatial(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err("tokens_to_spatial", &s, &[h, w]));
    }
    let t = g.tape.permute(x, &[0, 2, 1])?;
    g.tape.reshape(t, &[s[0], s[2], h, w])
}

/// Two stride-2 3x3 conv-BN-activation layers: `[B,3,H,W] → [B,C,H/4,W/4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub act: Activation,
}

impl Stem {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, widths: [usize; 2], act: Activation) -> Self {
        Stem {
            conv1: b.scoped("conv1", |b| b.conv_bn(3, widths[0], 3, 2, 1)),
            conv2: b.scoped("conv2", |b| b.conv_bn(widths[0], widths[1], 3, 2, 1)),
            act,
        }
    }

    pub fn transfer(&self, t: &mut Transfer) -> Result<Self> {
        Ok(Stem {
            conv1: t.conv_bn(&self.conv1)?,
            conv2: t.conv_bn(&self.conv2)?,
            act: self.act,
        })
    }
}

pub fn patch_embed(g: &mut Graph, x: Var, stem: &Stem) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err("patch_embed", &s, &[3]));
    }
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(TensorError::invalid(
            "patch_embed",
            format!("input {}x{} is not divisible by 4", s[2], s[3]),
        ));
    }
    let y = conv_bn(g, x, &stem.conv1)?;
    let y = activation(g, stem.act, y)?;
    let y = conv_bn(g, y, &stem.conv2)?;
    activation(g, stem.act, y)
}

/// Stride-2 3x3 conv-BN downsampler between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub conv: ConvBn,
}

impl Embedding {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, c_in: usize, c_out: usize) -> Self {
        Embedding {
            conv: b.conv_bn(c_in, c_out, 3, 2, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        conv_bn(g, x, &self.conv)
    }

    pub fn transfer(&self, t: &mut Transfer) -> Result<Self> {
        Ok(Embedding {
            conv: t.conv_bn(&self.conv)?,
        })
    }
}

/// 4D MetaBlock: pool token mixer then a 1x1-conv MLP, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Mb4d {
    pub width: usize,
    pub fc1: ConvBn,
    pub fc2: ConvBn,
    pub act: Activation,
    pub norm: Norm4d,
    /// Pre-mixer and pre-MLP norms for the GN/LN variants.
    pub pre_norms: Option<(NormParams, NormParams)>,
}

impl Mb4d {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, width: usize, exp: usize, act: Activation, norm: Norm4d) -> Self {
        let hidden = width * exp;
        let (fc1, fc2, pre_norms) = match norm {
            Norm4d::Bn => (
                b.scoped("fc1", |b| b.conv_bn(width, hidden, 1, 1, 0)),
                b.scoped("fc2", |b| b.conv_bn(hidden, width, 1, 1, 0)),
                None,
            ),
            Norm4d::Gn | Norm4d::Ln => {
                let n1 = b.scoped("norm1", |b| b.norm(width));
                let n2 = b.scoped("norm2", |b| b.norm(width));
                let fc1 = b.scoped("fc1", |b| b.scoped("conv", |b| b.conv(width, hidden, 1, 1, 0)));
                let fc2 = b.scoped("fc2", |b| b.scoped("conv", |b| b.conv(hidden, width, 1, 1, 0)));
                (
                    ConvBn { conv: fc1, bn: None },
                    ConvBn { conv: fc2, bn: None },
                    Some((n1, n2)),
                )
            }
        };
        Mb4d {
            width,
            fc1,
            fc2,
            act,
            norm,
            pre_norms,
        }
    }

    fn pre_norm(&self, g: &mut Graph, x: Var, which: usize) -> Result<Var> {
        let Some((n1, n2)) = &self.pre_norms else {
            return Ok(x);
        };
        let p = if which == 0 { n1 } else { n2 };
        match self.norm {
            Norm4d::Gn => groupnorm(g, x, 1, p),
            Norm4d::Ln => channel_layernorm(g, x, p),
            Norm4d::Bn => Ok(x),
        }
    }

    /// `I = Pool(X) + X`, `Y = Conv_B(Conv_{B,G}(I)) + I`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.width {
            return Err(shape_err("mb4d_forward", &s, &[self.width]));
        }
        let n = self.pre_norm(g, x, 0)?;
        let pooled = avgpool3x3(g, n)?;
        let mixed = g.tape.add(pooled, x)?;
        let n = self.pre_norm(g, mixed, 1)?;
        let h = conv_bn(g, n, &self.fc1)?;
        let h = activation(g, self.act, h)?;
        let h = conv_bn(g, h, &self.fc2)?;
        g.tape.add(h, mixed)
    }

    pub fn transfer(&self, t: &mut Transfer) -> Result<Self> {
        Ok(Mb4d {
            width: self.width,
            fc1: t.conv_bn(&self.fc1)?,
            fc2: t.conv_bn(&self.fc2)?,
            act: self.act,
            norm: self.norm,
            pre_norms: self.pre_norms.as_ref().map(|(a, b)| (t.norm(a), t.norm(b))),
        })
    }
}

/// 3D MetaBlock: pre-LN multi-head attention and a pre-LN linear MLP, both
/// residual, on `[B, N, C]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Mb3d {
    pub width: usize,
    pub norm1: NormParams,
    pub attn: AttnParams,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub act: Activation,
}

impl Mb3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<R>,
        width: usize,
        heads: usize,
        d_qk: usize,
        d_v: usize,
        exp: usize,
        tokens: usize,
        act: Activation,
    ) -> Self {
        Mb3d {
            width,
            norm1: b.scoped("norm1", |b| b.norm(width)),
            attn: b.scoped("attn", |b| b.attention(width, heads, d_qk, d_v, tokens)),
            norm2: b.scoped("norm2", |b| b.norm(width)),
            fc1: b.scoped("fc1", |b| b.linear(width, width * exp)),
            fc2: b.scoped("fc2", |b| b.linear(width * exp, width)),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(shape_err("mb3d_forward", &s, &[self.width]));
        }
        let n = layernorm(g, x, &self.norm1)?;
        let a = mhsa(g, n, &self.attn)?;
        let mixed = g.tape.add(a, x)?;
        let n = layernorm(g, mixed, &self.norm2)?;
        let h = linear(g, n, &self.fc1)?;
        let h = activation(g, self.act, h)?;
        let h = linear(g, h, &self.fc2)?;
        g.tape.add(h, mixed)
    }

    pub fn transfer(&self, t: &mut Transfer) -> Self {
        Mb3d {
            width: self.width,
            norm1: t.norm(&self.norm1),
            attn: self.attn.transfer(t),
            norm2: t.norm(&self.norm2),
            fc1: t.linear(&self.fc1),
            fc2: t.linear(&self.fc2),
            act: self.act,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero(store: &mut ParamStore, ids: &[crate::nn::ParamId]) {
        for &id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn mb4d(width: usize) -> (ParamStore, Mb4d) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = Mb4d::new(&mut ParamBuilder::new(&mut store, &mut rng), width, 4, Activation::Gelu, Norm4d::Bn);
        (store, b)
    }

    fn eval(store: &ParamStore, f: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval(store);
        let xv = g.input(x.clone())?;
        let y = f(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn mb4d_with_zero_mlp_is_pool_residual() {
        let (mut store, b) = mb4d(8);
        let bn = b.fc2.bn.clone().unwrap();
        zero(&mut store, &[b.fc2.conv.weight, b.fc2.conv.bias.unwrap(), bn.beta]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng);
        let y = eval(&store, |g, x| b.forward(g, x), &x).unwrap();
        let pooled = eval(&store, |g, x| avgpool3x3(g, x), &x).unwrap();
        for ((y, p), x) in y.data().iter().zip(pooled.data()).zip(x.data()) {
            assert!((y - (p + x)).abs() < 1e-6);
        }
        let c = Tensor::full(&[1, 8, 4, 4], 1.5);
        let y = eval(&store, |g, x| b.forward(g, x), &c).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn blocks_preserve_shape_and_rank() {
        let (store, b) = mb4d(48);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 48, 16, 16], 1.0, &mut rng);
        assert_eq!(eval(&store, |g, x| b.forward(g, x), &x).unwrap().shape(), &[2, 48, 16, 16]);
        assert!(eval(&store, |g, x| b.forward(g, x), &Tensor::zeros(&[2, 16, 48])).is_err());

        let mut store = ParamStore::new();
        let m = Mb3d::new(&mut ParamBuilder::new(&mut store, &mut rng), 32, 2, 8, 16, 4, 9, Activation::Gelu);
        let t = Tensor::randn(&[1, 9, 32], 1.0, &mut rng);
        assert_eq!(eval(&store, |g, x| m.forward(g, x), &t).unwrap().shape(), &[1, 9, 32]);
        assert!(eval(&store, |g, x| m.forward(g, x), &Tensor::zeros(&[1, 32, 3, 3])).is_err());
    }

    #[test]
    fn mb3d_with_zero_projections_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = Mb3d::new(&mut ParamBuilder::new(&mut store, &mut rng), 16, 2, 8, 8, 4, 4, Activation::Gelu);
        zero(
            &mut store,
            &[m.attn.proj.weight, m.attn.proj.bias.unwrap(), m.fc2.weight, m.fc2.bias.unwrap()],
        );
        let x = Tensor::randn(&[2, 4, 16], 1.0, &mut rng);
        assert_eq!(eval(&store, |g, x| m.forward(g, x), &x).unwrap(), x);
    }

    #[test]
    fn patch_embed_quarters_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut ParamBuilder::new(&mut store, &mut rng), [24, 48], Activation::Gelu);
        let y = eval(&store, |g, x| patch_embed(g, x, &stem), &Tensor::zeros(&[1, 3, 224, 224])).unwrap();
        assert_eq!(y.shape(), &[1, 48, 56, 56]);
        let y = eval(&store, |g, x| patch_embed(g, x, &stem), &Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(y.shape(), &[1, 48, 16, 16]);
        assert!(eval(&store, |g, x| patch_embed(g, x, &stem), &Tensor::zeros(&[1, 3, 225, 225])).is_err());
    }

    #[test]
    fn token_reshape_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let x = Tensor::randn(&[1, 24, 7, 7], 1.0, &mut rng);
        let tokens = eval(&store, spatial_to_tokens, &x).unwrap();
        assert_eq!(tokens.shape(), &[1, 49, 24]);
        assert_eq!(tokens.get(&[0, 10, 3]), x.get(&[0, 3, 1, 3]));
        let back = eval(&store, |g, t| tokens_to_spatial(g, t, 7, 7), &tokens).unwrap();
        assert_eq!(back, x);
    }
}

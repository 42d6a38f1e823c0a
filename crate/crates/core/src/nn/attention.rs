use rand::Rng;

use super::layers::{linear, LinearParams, Transfer};
use super::params::{shape_err, Graph, ParamBuilder, ParamId, ParamKind};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Multi-head self-attention with a learned additive bias table.
///
/// Projections map `C → heads·d_qk` (queries, keys) and `C → heads·d_v`
/// (values); the output projection maps `heads·d_v → C`. `attn_bias` is a
/// dense `[heads, tokens, tokens]` table, so the token count is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub proj: LinearParams,
    pub attn_bias: ParamId,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub tokens: usize,
    /// Multiplier on `Q·Kᵀ`; `1/√C` for a stage of width `C`.
    pub scale: f32,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn attention(&mut self, width: usize, heads: usize, d_qk: usize, d_v: usize, tokens: usize) -> AttnParams {
        let q = self.scoped("q", |b| b.linear(width, heads * d_qk));
        let k = self.scoped("k", |b| b.linear(width, heads * d_qk));
        let v = self.scoped("v", |b| b.linear(width, heads * d_v));
        let proj = self.scoped("proj", |b| b.linear(heads * d_v, width));
        let bias = Tensor::trunc_normal(&[heads, tokens, tokens], 0.02, self.rng);
        let attn_bias = self.add("attn_bias", bias, ParamKind::Weight);
        AttnParams {
            q,
            k,
            v,
            proj,
            attn_bias,
            heads,
            d_qk,
            d_v,
            tokens,
            scale: 1.0 / (width as f32).sqrt(),
        }
    }
}

impl AttnParams {
    pub fn transfer(&self, t: &mut Transfer) -> Self {
        AttnParams {
            q: t.linear(&self.q),
            k: t.linear(&self.k),
            v: t.linear(&self.v),
            proj: t.linear(&self.proj),
            attn_bias: t.copy(self.attn_bias),
            ..*self
        }
    }
}

fn split_heads(g: &mut Graph, x: Var, b: usize, n: usize, heads: usize, d: usize) -> Result<Var> {
    let r = g.tape.reshape(x, &[b, n, heads, d])?;
    g.tape.permute(r, &[0, 2, 1, 3])
}

/// `Softmax(Q·Kᵀ·scale + bias)·V` per head, heads concatenated and projected
/// back to the model width. `x` is `[B, N, C]`.
pub fn mhsa(g: &mut Graph, x: Var, p: &AttnParams) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err("mhsa", &s, &[p.tokens]));
    }
    let (b, n) = (s[0], s[1]);
    if n != p.tokens {
        return Err(TensorError::invalid(
            "mhsa",
            format!("input has {n} tokens but the attention bias table covers {}", p.tokens),
        ));
    }
    let q = linear(g, x, &p.q)?;
    let k = linear(g, x, &p.k)?;
    let v = linear(g, x, &p.v)?;
    let q = split_heads(g, q, b, n, p.heads, p.d_qk)?;
    let k = split_heads(g, k, b, n, p.heads, p.d_qk)?;
    let v = split_heads(g, v, b, n, p.heads, p.d_v)?;
    let kt = g.tape.transpose(k)?;
    let logits = g.tape.matmul(q, kt)?;
    let logits = g.tape.scale(logits, p.scale)?;
    let bias = g.param(p.attn_bias)?;
    let logits = g.tape.add(logits, bias)?;
    let attn = g.tape.softmax(logits, 3)?;
    let out = g.tape.matmul(attn, v)?;
    let out = g.tape.permute(out, &[0, 2, 1, 3])?;
    let out = g.tape.reshape(out, &[b, n, p.heads * p.d_v])?;
    linear(g, out, &p.proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamBuilder, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(tokens: usize) -> (ParamStore, AttnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = ParamBuilder::new(&mut store, &mut rng).attention(16, 2, 8, 8, tokens);
        (store, p)
    }

    fn run(store: &ParamStore, p: &AttnParams, x: &Tensor) -> Tensor {
        let mut g = Graph::eval(store);
        let xv = g.input(x.clone()).unwrap();
        let y = mhsa(&mut g, xv, p).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_token_is_value_then_projection() {
        let (mut store, p) = setup(1);
        store.get_mut(p.attn_bias).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 1, 16], 1.0, &mut rng);
        let y = run(&store, &p, &x);
        let mut g = Graph::eval(&store);
        let xv = g.input(x).unwrap();
        let v = crate::nn::linear(&mut g, xv, &p.v).unwrap();
        let want = crate::nn::linear(&mut g, v, &p.proj).unwrap();
        assert!(y.max_abs_diff(g.value(want)) < 1e-6);
    }

    #[test]
    fn uniform_bias_shift_changes_nothing() {
        let (mut store, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4, 16], 1.0, &mut rng);
        let before = run(&store, &p, &x);
        store.get_mut(p.attn_bias).data_mut().iter_mut().for_each(|b| *b += 3.5);
        assert!(run(&store, &p, &x).max_abs_diff(&before) < 1e-5);
    }

    #[test]
    fn token_count_must_match_bias_table() {
        let (store, p) = setup(4);
        let mut g = Graph::eval(&store);
        let xv = g.input(Tensor::zeros(&[1, 5, 16])).unwrap();
        assert!(mhsa(&mut g, xv, &p).is_err());
        let flat = g.input(Tensor::zeros(&[4, 16])).unwrap();
        assert!(mhsa(&mut g, flat, &p).is_err());
    }

    #[test]
    fn scale_uses_model_width() {
        let (_, p) = setup(4);
        assert_eq!(p.scale, 0.25);
        assert_eq!(p.tokens, 4);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Graph;
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Noise added to the branch logits before the tempered softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `ε ~ U(0, 1)`.
    #[default]
    UniformAsWritten,
    /// `ε = −log(−log u)`, `u ~ U(0, 1)`.
    StandardGumbel,
    /// `ε = 0`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f32,
    pub noise: NoiseKind,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 1.0,
            noise: NoiseKind::UniformAsWritten,
        }
    }
}

impl GumbelConfig {
    pub fn new(tau: f32, noise: NoiseKind) -> Self {
        GumbelConfig { tau, noise }
    }

    /// Noise-free evaluation setting.
    pub fn eval(tau: f32) -> Self {
        GumbelConfig { tau, noise: NoiseKind::None }
    }

    pub fn check(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(TensorError::invalid("gumbel", format!("temperature must be positive, got {}", self.tau)))
        }
    }

    /// Linear anneal from `start` to `end` over `total` steps.
    pub fn annealed(start: f32, end: f32, step: usize, total: usize) -> f32 {
        if total <= 1 {
            return end;
        }
        let t = (step.min(total - 1)) as f32 / (total - 1) as f32;
        start + (end - start) * t
    }
}

pub fn sample_noise<R: Rng>(kind: NoiseKind, n: usize, rng: &mut R) -> Vec<f32> {
    match kind {
        NoiseKind::None => vec![0.0; n],
        NoiseKind::UniformAsWritten => (0..n).map(|_| rng.random::<f32>()).collect(),
        NoiseKind::StandardGumbel => (0..n)
            .map(|_| {
                // Open interval keeps both logs finite.
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                (-(-u.ln()).ln()) as f32
            })
            .collect(),
    }
}

/// `softmax((α + ε) / τ)` with explicit noise.
pub fn branch_weights_with_noise(alpha: &[f32], eps: &[f32], tau: f32) -> Result<Vec<f32>> {
    if !(tau > 0.0) {
        return Err(TensorError::invalid("branch_weights", format!("temperature must be positive, got {tau}")));
    }
    if alpha.is_empty() || alpha.len() != eps.len() {
        return Err(TensorError::ShapeMismatch {
            op: "branch_weights",
            lhs: vec![alpha.len()],
            rhs: vec![eps.len()],
        });
    }
    let z: Vec<f64> = alpha
        .iter()
        .zip(eps)
        .map(|(&a, &e)| (a as f64 + e as f64) / tau as f64)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.iter().map(|v| (v / s) as f32).collect())
}

/// Samples noise from `rng` and returns the mixing weights.
pub fn branch_weights<R: Rng>(alpha: &[f32], cfg: &GumbelConfig, rng: &mut R) -> Result<Vec<f32>> {
    cfg.check()?;
    if alpha.len() < 2 {
        return Err(TensorError::invalid("branch_weights", "need at least two branches"));
    }
    let eps = sample_noise(cfg.noise, alpha.len(), rng);
    branch_weights_with_noise(alpha, &eps, cfg.tau)
}

/// Differentiable weights on the tape; `alpha` is a `[n]` variable.
pub fn branch_weights_var(g: &mut Graph, alpha: Var, eps: &[f32], tau: f32) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::invalid("branch_weights", format!("temperature must be positive, got {tau}")));
    }
    let e = g.input(Tensor::from_vec(eps.to_vec()))?;
    let z = g.tape.add(alpha, e)?;
    let z = g.tape.scale(z, 1.0 / tau)?;
    g.tape.softmax(z, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_noise_example() {
        let w = branch_weights_with_noise(&[0.0, 0.0], &[0.9, 0.1], 1.0).unwrap();
        assert!((w[0] - 0.6900).abs() < 1e-4 && (w[1] - 0.3100).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn equal_alphas_without_noise_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = branch_weights(&[0.3; 3], &GumbelConfig::eval(1.0), &mut rng).unwrap();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(branch_weights(&[0.0, 1.0], &GumbelConfig::new(0.0, NoiseKind::None), &mut rng).is_err());
        assert!(branch_weights(&[0.0, 1.0], &GumbelConfig::new(-1.0, NoiseKind::None), &mut rng).is_err());
    }

    #[test]
    fn gumbel_noise_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_noise(NoiseKind::StandardGumbel, 10_000, &mut rng).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(GumbelConfig::annealed(5.0, 0.1, 0, 10), 5.0);
        assert!((GumbelConfig::annealed(5.0, 0.1, 9, 10) - 0.1).abs() < 1e-6);
    }
}

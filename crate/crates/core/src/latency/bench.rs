//! Single-threaded host micro-benchmarks of standalone components.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttnShape, LatencyEntry, LatencyError, LatencyTable};
use crate::arch::{global_pool, Block, BlockSpec, ComponentKey, ComponentKind, Model};
use crate::nn::{linear, patch_embed, Embedding, Graph, LinearParams, Norm4d, ParamBuilder, ParamStore, Stem, Transfer};
use crate::tensor::{Activation, Result as TResult, Tensor};

/// Thread-count variable; benchmarks refuse to run unless it is unset or 1.
pub const THREADS_ENV: &str = "EFFICIENTFORMER_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub measure_iters: usize,
    /// Timed sets; samples from all sets are pooled.
    pub repeat_sets: usize,
    pub attn: AttnShape,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(attn: AttnShape) -> Self {
        BenchConfig {
            warmup_iters: 5,
            measure_iters: 30,
            repeat_sets: 1,
            attn,
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<(), LatencyError> {
        if self.measure_iters < 30 || self.repeat_sets == 0 {
            return Err(LatencyError::Config(format!(
                "need at least 30 measured iterations in at least one set, got {} x {}",
                self.measure_iters, self.repeat_sets
            )));
        }
        if let Ok(v) = std::env::var(THREADS_ENV) {
            if v.trim() != "1" {
                return Err(LatencyError::Config(format!("{THREADS_ENV}={v}; latency tables require 1 thread")));
            }
        }
        Ok(())
    }
}

/// Cartesian benchmark grid. `exp` is the expansion for blocks and the
/// auxiliary size (input width, first stem width, classes) otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kinds: Vec<ComponentKind>,
    pub widths: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub exp: usize,
}

impl Grid {
    pub fn keys(&self) -> Result<Vec<ComponentKey>, LatencyError> {
        if self.kinds.is_empty() || self.widths.is_empty() || self.resolutions.is_empty() {
            return Err(LatencyError::Config("kinds, widths and resolutions must be non-empty".into()));
        }
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &width in &self.widths {
                for &resolution in &self.resolutions {
                    out.push(ComponentKey {
                        kind,
                        width,
                        resolution,
                        exp: self.exp,
                    });
                }
            }
        }
        Ok(out)
    }
}

enum Probe {
    Stem(Stem),
    Embed(Embedding),
    Block(Block),
    Head(LinearParams),
}

struct Standalone {
    store: ParamStore,
    probe: Probe,
    input: Tensor,
}

fn build(key: &ComponentKey, attn: AttnShape, seed: u64) -> Result<Standalone, String> {
    let ComponentKey {
        kind,
        width,
        resolution: r,
        exp,
    } = *key;
    if width == 0 || r == 0 || exp == 0 {
        return Err("width, resolution and exp must be positive".into());
    }
    if matches!(kind, ComponentKind::Mb4d | ComponentKind::Mb3d | ComponentKind::Embed) && width % 16 != 0 {
        return Err(format!("width {width} is not a multiple of 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = ParamStore::new();
    let mut b = ParamBuilder::new(&mut raw, &mut rng);
    let act = Activation::Gelu;
    let (probe, shape): (Probe, Vec<usize>) = match kind {
        ComponentKind::Stem => {
            if r % 4 != 0 {
                return Err(format!("stem input {r} not divisible by 4"));
            }
            (Probe::Stem(Stem::new(&mut b, [exp, width], act)), vec![1, 3, r, r])
        }
        ComponentKind::Embed => (Probe::Embed(Embedding::new(&mut b, exp, width)), vec![1, exp, 2 * r, 2 * r]),
        ComponentKind::Mb4d => (
            Probe::Block(Block::build(&mut b, &BlockSpec::Mb4d { width, exp }, r, &dummy_arch()).expect("block")),
            vec![1, width, r, r],
        ),
        ComponentKind::Mb3d => {
            let spec = BlockSpec::Mb3d {
                width,
                heads: attn.heads,
                d_qk: attn.d_qk,
                d_v: attn.d_v,
                exp,
            };
            (
                Probe::Block(Block::build(&mut b, &spec, r, &dummy_arch()).expect("block")),
                vec![1, r * r, width],
            )
        }
        ComponentKind::Head => (Probe::Head(b.linear(width, exp)), vec![1, width, r, r]),
    };
    let input = Tensor::randn(&shape, 1.0, &mut rng);
    // Inference path: BN folded into the preceding convolutions.
    let mut store = ParamStore::new();
    let mut t = Transfer {
        src: &raw,
        dst: &mut store,
        fold_bn: true,
    };
    let probe = match probe {
        Probe::Stem(s) => Probe::Stem(s.transfer(&mut t).map_err(|e| e.to_string())?),
        Probe::Embed(e) => Probe::Embed(e.transfer(&mut t).map_err(|e| e.to_string())?),
        Probe::Block(bk) => Probe::Block(bk.transfer(&mut t).map_err(|e| e.to_string())?),
        Probe::Head(h) => Probe::Head(t.linear(&h)),
    };
    Ok(Standalone { store, probe, input })
}

fn dummy_arch() -> crate::arch::ArchSpec {
    let mut s = crate::arch::preset("toy").expect("toy preset");
    s.activation = Activation::Gelu;
    s.norm_4d = Norm4d::Bn;
    s
}

impl Standalone {
    fn run(&self) -> TResult<()> {
        let mut g = Graph::eval(&self.store);
        let x = g.input(self.input.detached())?;
        match &self.probe {
            Probe::Stem(s) => {
                patch_embed(&mut g, x, s)?;
            }
            Probe::Embed(e) => {
                e.forward(&mut g, x)?;
            }
            Probe::Block(b) => {
                let f = match b {
                    Block::Mb4d(_) => crate::nn::Feature::Spatial(x),
                    Block::Mb3d(_) => {
                        let n = self.input.shape()[1];
                        let side = (n as f64).sqrt().round() as usize;
                        crate::nn::Feature::Tokens { x, h: side, w: side }
                    }
                };
                b.forward(&mut g, f)?;
            }
            Probe::Head(h) => {
                let p = global_pool(&mut g, crate::nn::Feature::Spatial(x))?;
                linear(&mut g, p, h)?;
            }
        }
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and median absolute deviation of timed runs of `f`.
fn time<F: FnMut() -> Result<(), String>>(cfg: &BenchConfig, mut f: F) -> Result<LatencyEntry, String> {
    for _ in 0..cfg.warmup_iters {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.measure_iters * cfg.repeat_sets);
    for _ in 0..cfg.repeat_sets {
        for _ in 0..cfg.measure_iters {
            let t0 = Instant::now();
            f()?;
            samples.push(t0.elapsed().as_secs_f64());
        }
    }
    let n = samples.len();
    let med = median(&mut samples);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&mut dev);
    if med < 1e-6 {
        log::warn!("median {med:.3e}s is near timer resolution; entry is unreliable");
    }
    Ok(LatencyEntry {
        median_s: med.max(f64::MIN_POSITIVE),
        mad_s: mad,
        samples: n,
    })
}

/// Times one component in isolation at batch 1.
pub fn benchmark_block(key: &ComponentKey, cfg: &BenchConfig) -> Result<LatencyEntry, LatencyError> {
    cfg.check()?;
    let err = |message: String| LatencyError::Benchmark { key: *key, message };
    let sa = build(key, cfg.attn, cfg.seed).map_err(err)?;
    time(cfg, || sa.run().map_err(|e| e.to_string())).map_err(err)
}

/// Benchmarks every key; failures are returned alongside the partial table.
pub fn build_table_for_keys(
    keys: &[ComponentKey],
    cfg: &BenchConfig,
) -> Result<(LatencyTable, Vec<LatencyError>), LatencyError> {
    cfg.check()?;
    if keys.is_empty() {
        return Err(LatencyError::Config("no keys to benchmark".into()));
    }
    let mut table = LatencyTable::new(super::host_fingerprint());
    let mut errors = Vec::new();
    for key in keys {
        if table.get(key).is_some() {
            continue;
        }
        match benchmark_block(key, cfg) {
            Ok(e) => table.insert(*key, e),
            Err(e) => errors.push(e),
        }
    }
    Ok((table, errors))
}

pub fn build_table(grid: &Grid, cfg: &BenchConfig) -> Result<(LatencyTable, Vec<LatencyError>), LatencyError> {
    build_table_for_keys(&grid.keys()?, cfg)
}

/// End-to-end batch-1 inference time of a model with BN folded.
pub fn measure_model(model: &Model, cfg: &BenchConfig) -> Result<LatencyEntry, LatencyError> {
    cfg.check()?;
    let folded = model.fold_bn().map_err(|e| LatencyError::Config(e.to_string()))?;
    let r = model.spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::randn(&[1, 3, r, r], 1.0, &mut rng);
    time(cfg, || folded.logits(&x).map(|_| ()).map_err(|e| e.to_string())).map_err(LatencyError::Config)
}

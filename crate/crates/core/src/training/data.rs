//! Seeded synthetic image datasets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// A class-specific stripe pattern and colour in the class's quadrant.
    #[default]
    QuadrantPattern,
    /// A coloured Gaussian blob at a class-specific position.
    GaussianBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub resolution: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub kind: GeneratorKind,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_noise() -> f32 {
    0.5
}

impl DatasetSpec {
    pub fn toy(classes: usize, seed: u64) -> Self {
        DatasetSpec {
            classes,
            resolution: 64,
            train: 512,
            val: 128,
            test: 256,
            seed,
            kind: GeneratorKind::QuadrantPattern,
            noise: default_noise(),
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.resolution == 0 || self.resolution % 32 != 0 {
            return Err(TrainError::Data(format!(
                "resolution {} is not a positive multiple of 32",
                self.resolution
            )));
        }
        if self.classes < 2 {
            return Err(TrainError::Data("need at least two classes".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(TrainError::Data(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// One minibatch: `images` is `[B, 3, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    /// Flattened `[N, 3, R, R]`.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub resolution: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let r = self.resolution;
        Batch {
            images: Tensor::new(vec![idx.len(), 3, r, r], data).expect("batch shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Batches over a seeded shuffle.
    pub fn shuffled_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn subset(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            resolution: self.resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Fixed per-class colour, `[r, g, b]` with unit-scale entries.
fn palette(k: usize) -> [f32; 3] {
    const P: [[f32; 3]; 6] = [
        [1.0, -0.5, -0.5],
        [-0.5, 1.0, -0.5],
        [-0.5, -0.5, 1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
    ];
    P[k % P.len()]
}

/// Noise-free template of class `k`.
pub fn template(kind: GeneratorKind, k: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * r * r];
    let col = palette(k);
    match kind {
        GeneratorKind::QuadrantPattern => {
            let q = k % 4;
            let (y0, x0) = ((q / 2) * r / 2, (q % 2) * r / 2);
            let half = r / 2;
            // Orientation and period vary with the class.
            let (a, b) = [(1, 0), (0, 1), (1, 1), (1, -1)][(k / 4 + k) % 4];
            let period = 4 + 2 * (k / 4);
            for y in 0..half {
                for x in 0..half {
                    let t = (a * y as i64 + b * x as i64).rem_euclid(period as i64) as usize;
                    let s = if t < period / 2 { 1.0 } else { -1.0 };
                    for c in 0..3 {
                        out[(c * r + y0 + y) * r + x0 + x] = s * col[c];
                    }
                }
            }
        }
        GeneratorKind::GaussianBlob => {
            let angle = std::f32::consts::TAU * k as f32 / 8.0;
            let ring = 0.25 + 0.1 * (k / 8) as f32;
            let cy = r as f32 * (0.5 + ring * angle.sin());
            let cx = r as f32 * (0.5 + ring * angle.cos());
            let sigma = r as f32 / 8.0;
            for y in 0..r {
                for x in 0..r {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let v = 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        out[(c * r + y) * r + x] = v * col[c];
                    }
                }
            }
        }
    }
    out
}

fn sample(spec: &DatasetSpec, templates: &[Vec<f32>], label: usize, index: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    let gain: f32 = rng.random_range(0.8..1.2);
    let t = &templates[label];
    if spec.noise == 0.0 {
        return t.clone();
    }
    let normal = Normal::new(0.0f32, spec.noise).expect("valid noise");
    t.iter().map(|&v| gain * v + normal.sample(&mut rng)).collect()
}

/// Deterministic dataset: balanced labels, disjoint splits from one seeded
/// permutation of sample indices.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Dataset, TrainError> {
    spec.check()?;
    let r = spec.resolution;
    let templates: Vec<Vec<f32>> = (0..spec.classes).map(|k| template(spec.kind, k, r)).collect();
    let total = spec.total();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let build = |ids: &[usize]| {
        let mut s = Split {
            images: Vec::with_capacity(ids.len() * 3 * r * r),
            labels: Vec::with_capacity(ids.len()),
            resolution: r,
        };
        for &i in ids {
            let label = i % spec.classes;
            s.images.extend(sample(spec, &templates, label, i));
            s.labels.push(label);
        }
        s
    };
    let (a, rest) = order.split_at(spec.train);
    let (b, c) = rest.split_at(spec.val);
    Ok(Dataset {
        spec: spec.clone(),
        train: build(a),
        val: build(b),
        test: build(c),
    })
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let r = self.spec.resolution;
        let mut tensors = Vec::new();
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            // Zero-sized tensors are not representable; empty splits are skipped.
            if s.is_empty() {
                continue;
            }
            tensors.push((
                format!("{name}.images"),
                Tensor::new(vec![s.len(), 3, r, r], s.images.clone()).expect("split shape"),
            ));
            tensors.push((
                format!("{name}.labels"),
                Tensor::from_vec(s.labels.iter().map(|&l| l as f32).collect()),
            ));
        }
        Checkpoint::new(tensors).with_metadata(serde_json::to_string(&self.spec).expect("spec serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Dataset, TrainError> {
        let meta = ck.metadata.as_deref().ok_or_else(|| TrainError::Data("dataset file has no spec".into()))?;
        let spec: DatasetSpec = serde_json::from_str(meta).map_err(|e| TrainError::Data(e.to_string()))?;
        let load = |name: &str, n: usize| -> Result<Split, TrainError> {
            if n == 0 {
                return Ok(Split {
                    resolution: spec.resolution,
                    ..Split::default()
                });
            }
            let images = ck.get(&format!("{name}.images"))?;
            let labels = ck.get(&format!("{name}.labels"))?;
            if images.shape() != [n, 3, spec.resolution, spec.resolution] || labels.len() != n {
                return Err(TrainError::Data(format!("split {name} does not match its spec")));
            }
            Ok(Split {
                images: images.data().to_vec(),
                labels: labels.data().iter().map(|&v| v as usize).collect(),
                resolution: spec.resolution,
            })
        };
        Ok(Dataset {
            train: load("train", spec.train)?,
            val: load("val", spec.val)?,
            test: load("test", spec.test)?,
            spec,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset, TrainError> {
        Dataset::from_checkpoint(&Checkpoint::load(path)?)
    }
}

//! Synthetic data, AdamW with warmup-cosine scheduling, supernet pretraining
//! and final-model training and evaluation.

mod data;
mod optim;

pub use data::{gen_synthetic, template, Batch, Dataset, DatasetSpec, GeneratorKind, Split};
pub use optim::{adamw_step, adamw_update, AdamWConfig, OptimState, Schedule};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{argmax_rows, ArchError, ArchSpec, Model};
use crate::nn::{Graph, ParamStore};
use crate::supernet::{GumbelConfig, NoiseKind, Simulation, SuperNet};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset: {0}")]
    Data(String),
    #[error("training configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model has {model} classes but the data has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error("training diverged at epoch {epoch} step {step}; parameters restored to the last good state{}", .checkpoint.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    Diverged {
        epoch: usize,
        step: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Supernet(#[from] crate::supernet::SupernetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` scales `1e-3` by `batch_size / 1024`.
    pub base_lr: Option<f64>,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            base_lr: None,
            min_lr: 1e-5,
            warmup_epochs: 1,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, train_len: usize) -> Result<Schedule, TrainError> {
        let s = Schedule {
            base_lr: self.base_lr.unwrap_or_else(|| Schedule::scaled_base_lr(self.batch_size)),
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: train_len.div_ceil(self.batch_size.max(1)),
        };
        s.check()?;
        Ok(s)
    }
}

/// Temperature annealing and noise for supernet training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelSchedule {
    pub tau_start: f32,
    pub tau_end: f32,
    pub noise: NoiseKind,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        GumbelSchedule {
            tau_start: 5.0,
            tau_end: 0.1,
            noise: NoiseKind::UniformAsWritten,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Training top-1 over the epoch.
    pub top1: f64,
    /// Validation top-1 at epoch end (absent without a validation split).
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean loss of the untrained network over the training split.
    pub initial_loss: f64,
    pub rows: Vec<MetricsRow>,
}

impl Metrics {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(|e| TrainError::Data(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// One forward/backward pass; returns `(loss, correct, grads, buffer updates)`.
type StepOut = (f64, usize, Vec<(crate::nn::ParamId, crate::tensor::Tensor)>, Vec<(crate::nn::ParamId, Vec<f32>)>);

fn check_classes(classes: usize, data: &Dataset) -> Result<(), TrainError> {
    if classes != data.spec.classes {
        return Err(TrainError::ClassMismatch {
            model: classes,
            data: data.spec.classes,
        });
    }
    Ok(())
}

fn is_divergence(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

/// Shared loop: `step_fn` runs one batch against the current store.
fn run_training<F>(
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    val_eval: &mut dyn FnMut(&ParamStore) -> Result<Option<f64>, TrainError>,
    mut step_fn: F,
    checkpoint: &mut dyn FnMut(&ParamStore, usize) -> Result<Option<PathBuf>, TrainError>,
) -> Result<Metrics, TrainError>
where
    F: FnMut(&ParamStore, &Batch, usize, &Schedule) -> Result<StepOut, TensorError>,
{
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let sched = cfg.schedule(data.train.len())?;
    let mut opt = OptimState::new(cfg.optim);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut metrics = Metrics::default();
    let mut last_good = store.clone();
    let mut last_ckpt: Option<PathBuf> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for batch in data.train.shuffled_batches(cfg.batch_size, &mut shuffle_rng) {
            let lr = sched.lr_at(step);
            let out = step_fn(store, &batch, step, &sched);
            let (loss, ok, grads, updates) = match out {
                Ok(o) if o.0.is_finite() => o,
                Err(e) if !is_divergence(&e) => return Err(e.into()),
                // Non-finite loss or activations.
                _ => {
                    *store = last_good;
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        checkpoint: last_ckpt,
                    });
                }
            };
            adamw_step(store, &grads, &mut opt, lr)?;
            store.apply_buffer_updates(updates);
            if store.iter().any(|(_, e)| !e.tensor.all_finite()) {
                *store = last_good;
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    checkpoint: last_ckpt,
                });
            }
            loss_sum += loss * batch.labels.len() as f64;
            correct += ok;
            seen += batch.labels.len();
            step += 1;
        }
        let val_top1 = val_eval(store)?;
        metrics.rows.push(MetricsRow {
            epoch,
            step,
            lr: sched.lr_at(step.saturating_sub(1)),
            loss: loss_sum / seen as f64,
            top1: correct as f64 / seen as f64,
            val_top1,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} top1 {:.4} val {:?}",
            loss_sum / seen as f64,
            correct as f64 / seen as f64,
            val_top1
        );
        last_good = store.clone();
        if let Some(p) = checkpoint(store, epoch)? {
            last_ckpt = Some(p);
        }
    }
    Ok(metrics)
}

fn count_correct(logits: &crate::tensor::Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Mean cross-entropy of a model over a split, in eval mode.
pub fn mean_loss(model: &Model, split: &Split, batch_size: usize) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut total = 0.0;
    for b in split.batches(batch_size) {
        let mut g = Graph::eval(&model.store);
        let x = g.input(b.images)?;
        let y = model.forward(&mut g, x)?;
        let l = g.tape.cross_entropy(y, &b.labels)?;
        total += g.value(l).data()[0] as f64 * b.labels.len() as f64;
    }
    Ok(total / split.len() as f64)
}

/// Jointly trains weights and branch logits; `tau` anneals linearly per step.
/// With `out_dir`, a checkpoint is written after every epoch.
pub fn train_supernet(
    sn: &mut SuperNet,
    data: &Dataset,
    cfg: &TrainConfig,
    gumbel: &GumbelSchedule,
    out_dir: Option<&Path>,
) -> Result<Metrics, TrainError> {
    check_classes(sn.layout.classes, data)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a77_0002);
    let template = sn.clone();
    let sim = Simulation::none(sn.paths.len());
    let initial_loss = supernet_loss(sn, &data.train, cfg.batch_size)?;
    let val = data.val.clone();
    let mut val_eval = |store: &ParamStore| -> Result<Option<f64>, TrainError> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut probe = template.clone();
        probe.store = store.clone();
        let batches = val.batches(cfg.batch_size);
        Ok(Some(
            crate::slimming::evaluate_supernet(&probe, &batches, &GumbelConfig::eval(gumbel.tau_end), &sim)
                .map_err(|e| TrainError::Data(e.to_string()))?,
        ))
    };
    let layout_json = serde_json::to_string(&sn.layout).expect("layout serializes");
    let mut checkpoint = |store: &ParamStore, epoch: usize| -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let p = dir.join(format!("supernet_epoch{epoch:03}.ckpt"));
        store.to_checkpoint().with_metadata(layout_json.clone()).save(&p)?;
        Ok(Some(p))
    };
    let net = sn.clone();
    let step_fn = |store: &ParamStore, b: &Batch, step: usize, s: &Schedule| -> Result<StepOut, TensorError> {
        let tau = GumbelConfig::annealed(gumbel.tau_start, gumbel.tau_end, step, s.total_steps());
        let gcfg = GumbelConfig::new(tau, gumbel.noise);
        let mut g = Graph::train(store);
        let x = g.input(b.images.detached())?;
        let logits = net.sample_forward(&mut g, x, &gcfg, &mut noise_rng, &sim)?;
        let ok = count_correct(g.value(logits), &b.labels);
        let loss = g.tape.cross_entropy(logits, &b.labels)?;
        let lv = g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        Ok((lv, ok, g.param_grads(), g.take_buffer_updates()))
    };
    let mut metrics = run_training(&mut sn.store, data, cfg, &mut val_eval, step_fn, &mut checkpoint)?;
    metrics.initial_loss = initial_loss;
    Ok(metrics)
}

fn supernet_loss(sn: &SuperNet, split: &Split, batch_size: usize) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let sim = Simulation::none(sn.paths.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for b in split.batches(batch_size) {
        let mut g = Graph::eval(&sn.store);
        let x = g.input(b.images)?;
        let y = sn.sample_forward(&mut g, x, &GumbelConfig::eval(1.0), &mut rng, &sim)?;
        let l = g.tape.cross_entropy(y, &b.labels)?;
        total += g.value(l).data()[0] as f64 * b.labels.len() as f64;
    }
    Ok(total / split.len() as f64)
}

/// Trains a freshly initialized model for `spec`.
pub fn train_final(spec: &ArchSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Metrics), TrainError> {
    let mut model = Model::instantiate(spec, cfg.seed)?;
    let metrics = train_model(&mut model, data, cfg, None)?;
    Ok((model, metrics))
}

/// Supervised training of an existing model in place.
pub fn train_model(model: &mut Model, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Metrics, TrainError> {
    check_classes(model.spec.head.classes, data)?;
    let initial_loss = mean_loss(model, &data.train, cfg.batch_size)?;
    let template = model.clone();
    let val = data.val.clone();
    let mut val_eval = |store: &ParamStore| -> Result<Option<f64>, TrainError> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut probe = template.clone();
        probe.store = store.clone();
        Ok(Some(evaluate(&probe, &val)?))
    };
    let spec_json = model.spec.to_json();
    let mut checkpoint = |store: &ParamStore, epoch: usize| -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let p = dir.join(format!("model_epoch{epoch:03}.ckpt"));
        store.to_checkpoint().with_metadata(spec_json.clone()).save(&p)?;
        Ok(Some(p))
    };
    let net = model.clone();
    let step_fn = |store: &ParamStore, b: &Batch, _step: usize, _s: &Schedule| -> Result<StepOut, TensorError> {
        let mut g = Graph::train(store);
        let x = g.input(b.images.detached())?;
        let logits = net.forward(&mut g, x)?;
        let ok = count_correct(g.value(logits), &b.labels);
        let loss = g.tape.cross_entropy(logits, &b.labels)?;
        let lv = g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        Ok((lv, ok, g.param_grads(), g.take_buffer_updates()))
    };
    let mut metrics = run_training(&mut model.store, data, cfg, &mut val_eval, step_fn, &mut checkpoint)?;
    metrics.initial_loss = initial_loss;
    Ok(metrics)
}

/// Top-1 accuracy (correct / total) on a split.
pub fn evaluate(model: &Model, split: &Split) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut correct = 0;
    for b in split.batches(64) {
        correct += count_correct(&model.logits(&b.images)?, &b.labels);
    }
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::preset;

    fn tiny_data(classes: usize) -> Dataset {
        gen_synthetic(&DatasetSpec {
            train: 32,
            val: 8,
            test: 8,
            ..DatasetSpec::toy(classes, 7)
        })
        .unwrap()
    }

    #[test]
    fn class_mismatch_rejected() {
        let spec = preset("toy").unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train_final(&spec, &tiny_data(3), &cfg), Err(TrainError::ClassMismatch { .. })));
    }

    #[test]
    fn empty_split_rejected() {
        let m = Model::instantiate(&preset("toy").unwrap(), 0).unwrap();
        assert!(matches!(evaluate(&m, &Split::default()), Err(TrainError::EmptySplit)));
    }

    #[test]
    fn metrics_csv_header() {
        let m = Metrics {
            initial_loss: 1.0,
            rows: vec![MetricsRow {
                epoch: 0,
                step: 4,
                lr: 0.1,
                loss: 0.5,
                top1: 0.25,
                val_top1: None,
            }],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,step,lr,loss,top1,val_top1\n0,4,"));
    }
}

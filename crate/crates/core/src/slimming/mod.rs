//! Greedy latency-driven slimming: at each step score depth, MB3D and width
//! reductions by accuracy drop per millisecond saved and apply the best.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{argmax_rows, ArchSpec, Layout, MIN_WIDTH, NUM_STAGES};
use crate::latency::{estimate_latency, LatencyError, LatencyTable};
use crate::supernet::{allows_3d, derive_arch, path_stages, Choice, GumbelConfig, Selection, Simulation, SuperNet, SupernetError};
use crate::training::Batch;

pub const WIDTH_STEP: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum SlimError {
    #[error("invalid slimming configuration: {0}")]
    Config(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Supernet(#[from] SupernetError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SlimAction {
    /// Replace a MetaPath with identity.
    DepthReduction { path: usize },
    /// Turn the earliest remaining MB3D into MB4D.
    Mb3dReduction { path: usize },
    /// Remove 16 channels from a stage.
    WidthReduction { stage: usize },
}

impl SlimAction {
    pub fn short(&self) -> &'static str {
        match self {
            SlimAction::DepthReduction { .. } => "DR",
            SlimAction::Mb3dReduction { .. } => "MR",
            SlimAction::WidthReduction { .. } => "WR",
        }
    }

    /// `(stage, block, kind rank)` used to break score ties.
    fn order_key(&self, layout: &Layout) -> (usize, usize, u8) {
        let pos = |p: usize| {
            let st = path_stages(layout)[p];
            let first: usize = layout.depths[..st].iter().sum();
            (st, p - first)
        };
        match *self {
            SlimAction::DepthReduction { path } => {
                let (s, b) = pos(path);
                (s, b, 0)
            }
            SlimAction::Mb3dReduction { path } => {
                let (s, b) = pos(path);
                (s, b, 1)
            }
            SlimAction::WidthReduction { stage } => (stage, 0, 2),
        }
    }

    pub fn apply(&self, state: &Selection) -> Selection {
        let mut next = state.clone();
        match *self {
            SlimAction::DepthReduction { path } => next.choices[path] = Choice::Identity,
            SlimAction::Mb3dReduction { path } => next.choices[path] = Choice::Mb4d,
            SlimAction::WidthReduction { stage } => next.widths[stage] -= WIDTH_STEP,
        }
        next
    }
}

impl std::fmt::Display for SlimAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlimAction::DepthReduction { path } => write!(f, "DR(path {path})"),
            SlimAction::Mb3dReduction { path } => write!(f, "MR(path {path})"),
            SlimAction::WidthReduction { stage } => write!(f, "WR(stage {})", stage + 1),
        }
    }
}

/// Sums of per-path importance over each stage's kept MetaPaths.
pub fn stage_sums(layout: &Layout, state: &Selection, per_path: &[f32]) -> [f32; NUM_STAGES] {
    let mut out = [0.0; NUM_STAGES];
    for ((&st, &c), &s) in path_stages(layout).iter().zip(&state.choices).zip(per_path) {
        if c != Choice::Identity {
            out[st] += s;
        }
    }
    out
}

fn argmin_first(values: impl Iterator<Item = (usize, f32)>) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Up to three applicable actions: DR on the least important kept path, MR
/// on the first MB3D, WR on the least important stage that can shrink.
pub fn candidate_actions(layout: &Layout, state: &Selection, per_path: &[f32]) -> Vec<SlimAction> {
    let mut out = Vec::new();
    let kept = state
        .choices
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != Choice::Identity)
        .map(|(p, _)| (p, per_path[p]));
    if let Some(path) = argmin_first(kept) {
        out.push(SlimAction::DepthReduction { path });
    }
    if let Some(path) = state.choices.iter().position(|&c| c == Choice::Mb3d) {
        out.push(SlimAction::Mb3dReduction { path });
    }
    let sums = stage_sums(layout, state, per_path);
    let shrinkable = (0..NUM_STAGES)
        .filter(|&j| state.widths[j] >= MIN_WIDTH + WIDTH_STEP)
        .map(|j| (j, sums[j]));
    if let Some(stage) = argmin_first(shrinkable) {
        out.push(SlimAction::WidthReduction { stage });
    }
    out
}

/// Accuracy-drop source for the slimming loop.
pub trait SlimOracle {
    /// Per-MetaPath importance for the current state.
    fn importance(&mut self, state: &Selection) -> Vec<f32>;
    /// Accuracy lost (positive = worse) moving from `state` to `next`.
    fn accuracy_drop(&mut self, state: &Selection, next: &Selection, action: &SlimAction) -> Result<(f64, f64, f64), SlimError>;
}

/// Per-latency accuracy drop: `drop / saved_ms`. `None` when nothing is saved.
pub fn score_action(drop: f64, saved_s: f64) -> Option<f64> {
    (saved_s > 0.0).then(|| drop / (saved_s * 1e3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimConfig {
    pub target_latency_s: f64,
    pub max_iters: usize,
}

impl SlimConfig {
    pub fn new(target_latency_s: f64) -> Self {
        SlimConfig {
            target_latency_s,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub action: SlimAction,
    pub est_latency_after: f64,
    pub drop: Option<f64>,
    pub score: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimStep {
    pub step: usize,
    pub action: SlimAction,
    pub importance: Vec<f32>,
    pub stage_importance: [f32; NUM_STAGES],
    pub est_latency_before: f64,
    pub est_latency_after: f64,
    pub acc_before: f64,
    pub acc_after: f64,
    pub score: f64,
    pub candidates: Vec<CandidateEval>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlimTrace {
    pub steps: Vec<SlimStep>,
}

impl SlimTrace {
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<SlimTrace, serde_json::Error> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(SlimTrace { steps })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}  {:<14} {:>12} {:>12} {:>9} {:>9} {:>12}",
            "step", "action", "lat_before", "lat_after", "acc_bef", "acc_aft", "score/ms"
        );
        for st in &self.steps {
            let _ = writeln!(
                s,
                "{:>4}  {:<14} {:>10.4}ms {:>10.4}ms {:>9.4} {:>9.4} {:>12.5}",
                st.step,
                st.action.to_string(),
                st.est_latency_before * 1e3,
                st.est_latency_after * 1e3,
                st.acc_before,
                st.acc_after,
                st.score
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlimResult {
    pub spec: ArchSpec,
    pub state: Selection,
    pub trace: SlimTrace,
    pub initial_latency_s: f64,
    pub final_latency_s: f64,
    pub reached: bool,
    pub diagnostics: Vec<String>,
}

/// Runs the greedy loop from `initial` until the estimate is within the
/// target, no action applies, or `max_iters` is hit.
pub fn slim<O: SlimOracle>(
    layout: &Layout,
    initial: &Selection,
    table: &LatencyTable,
    cfg: &SlimConfig,
    oracle: &mut O,
) -> Result<SlimResult, SlimError> {
    if !(cfg.target_latency_s > 0.0) {
        return Err(SlimError::Config(format!("target latency must be positive, got {}", cfg.target_latency_s)));
    }
    let est = |s: &Selection| -> Result<f64, SlimError> { Ok(estimate_latency(&derive_arch(layout, s)?, table)?) };
    let mut state = initial.clone();
    let initial_latency = est(&state)?;
    let mut lat = initial_latency;
    let mut trace = SlimTrace::default();
    let mut diagnostics = Vec::new();
    while lat > cfg.target_latency_s {
        if trace.steps.len() >= cfg.max_iters {
            diagnostics.push(format!("stopped after max_iters={} with {:.6}s estimated", cfg.max_iters, lat));
            break;
        }
        let per_path = oracle.importance(&state);
        let stage_importance = stage_sums(layout, &state, &per_path);
        let actions = candidate_actions(layout, &state, &per_path);
        if actions.is_empty() {
            diagnostics.push(format!(
                "no applicable action: minimal network estimated at {:.6}s exceeds target {:.6}s",
                lat, cfg.target_latency_s
            ));
            break;
        }
        let mut evals = Vec::new();
        let mut best: Option<(f64, (usize, usize, u8), usize, f64, f64, Selection)> = None;
        for a in actions {
            let next = a.apply(&state);
            let after = est(&next)?;
            let saved = lat - after;
            if saved <= 0.0 {
                evals.push(CandidateEval {
                    action: a,
                    est_latency_after: after,
                    drop: None,
                    score: None,
                    note: Some(format!("excluded: saves {saved:.3e}s")),
                });
                continue;
            }
            let (drop, acc_b, acc_a) = oracle.accuracy_drop(&state, &next, &a)?;
            let score = score_action(drop, saved).expect("positive saving");
            let key = a.order_key(layout);
            let better = match &best {
                None => true,
                Some((bs, bk, ..)) => score < *bs || (score == *bs && key < *bk),
            };
            if better {
                best = Some((score, key, evals.len(), acc_b, acc_a, next));
            }
            evals.push(CandidateEval {
                action: a,
                est_latency_after: after,
                drop: Some(drop),
                score: Some(score),
                note: None,
            });
        }
        let Some((score, _, idx, acc_before, acc_after, next)) = best else {
            diagnostics.push("every candidate action saves no latency; stopping".into());
            break;
        };
        let after = evals[idx].est_latency_after;
        trace.steps.push(SlimStep {
            step: trace.steps.len(),
            action: evals[idx].action,
            importance: per_path,
            stage_importance,
            est_latency_before: lat,
            est_latency_after: after,
            acc_before,
            acc_after,
            score,
            candidates: evals,
        });
        state = next;
        lat = after;
    }
    let spec = derive_arch(layout, &state)?;
    Ok(SlimResult {
        spec,
        state,
        trace,
        initial_latency_s: initial_latency,
        final_latency_s: lat,
        reached: lat <= cfg.target_latency_s,
        diagnostics,
    })
}

/// Held-out evaluation on a shared-weight supernet.
///
/// Paths changed from the initial selection are forced one-hot (identity
/// after DR, MB4D after MR); other paths mix noise-free at `tau`. Reduced
/// stages mask their lowest-L1 channels.
pub struct SupernetOracle<'a> {
    pub sn: &'a SuperNet,
    pub initial: Selection,
    pub eval: &'a [Batch],
    pub tau: f32,
}

impl<'a> SupernetOracle<'a> {
    pub fn new(sn: &'a SuperNet, initial: Selection, eval: &'a [Batch]) -> Self {
        SupernetOracle {
            sn,
            initial,
            eval,
            tau: 0.1,
        }
    }

    pub fn simulation(&self, state: &Selection) -> Simulation {
        let mut sim = Simulation::none(self.sn.paths.len());
        for (p, (&c, &c0)) in state.choices.iter().zip(&self.initial.choices).enumerate() {
            if c != c0 {
                sim.forced[p] = Some(c);
            }
        }
        for j in 0..NUM_STAGES {
            sim.masks[j] = self.sn.width_mask(j, state.widths[j]);
        }
        sim
    }

    pub fn accuracy(&self, state: &Selection) -> Result<f64, SlimError> {
        evaluate_supernet(self.sn, self.eval, &GumbelConfig::eval(self.tau), &self.simulation(state))
    }
}

/// Top-1 accuracy of the supernet under a simulation.
pub fn evaluate_supernet(sn: &SuperNet, eval: &[Batch], cfg: &GumbelConfig, sim: &Simulation) -> Result<f64, SlimError> {
    let total: usize = eval.iter().map(|b| b.labels.len()).sum();
    if total == 0 {
        return Err(SlimError::EmptyEvalSet);
    }
    // Noise-free evaluation never draws from this generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0;
    for b in eval {
        let logits = sn.eval_logits(&b.images, cfg, &mut rng, sim)?;
        correct += argmax_rows(&logits).iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy before minus after applying `action` to `state`.
pub fn eval_accuracy_drop(oracle: &SupernetOracle, state: &Selection, action: &SlimAction) -> Result<f64, SlimError> {
    let before = oracle.accuracy(state)?;
    let after = oracle.accuracy(&action.apply(state))?;
    Ok(before - after)
}

impl SlimOracle for SupernetOracle<'_> {
    fn importance(&mut self, _state: &Selection) -> Vec<f32> {
        self.sn.importance_scores().per_path
    }

    fn accuracy_drop(&mut self, state: &Selection, next: &Selection, _action: &SlimAction) -> Result<(f64, f64, f64), SlimError> {
        let before = self.accuracy(state)?;
        let after = self.accuracy(next)?;
        Ok((before - after, before, after))
    }
}

/// Fixed importances with a drop equal to the importance removed: the path's
/// score for DR, its MB3D share for MR and a per-channel share of the
/// stage sum for WR. Accuracy is reported as `1 − cumulative drop`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticOracle {
    pub layout: Layout,
    pub per_path: Vec<f32>,
}

impl StaticOracle {
    pub fn drop_of(&self, state: &Selection, action: &SlimAction) -> f64 {
        match *action {
            SlimAction::DepthReduction { path } => self.per_path[path] as f64,
            SlimAction::Mb3dReduction { path } => 0.5 * self.per_path[path] as f64,
            SlimAction::WidthReduction { stage } => {
                let sums = stage_sums(&self.layout, state, &self.per_path);
                sums[stage] as f64 * WIDTH_STEP as f64 / state.widths[stage] as f64
            }
        }
    }
}

impl SlimOracle for StaticOracle {
    fn importance(&mut self, _state: &Selection) -> Vec<f32> {
        self.per_path.clone()
    }

    fn accuracy_drop(&mut self, state: &Selection, _next: &Selection, action: &SlimAction) -> Result<(f64, f64, f64), SlimError> {
        let d = self.drop_of(state, action);
        Ok((d, 1.0, 1.0 - d))
    }
}

/// Whether every MB3D in `state` is in a stage that allows it.
pub fn placement_ok(layout: &Layout, state: &Selection) -> bool {
    path_stages(layout)
        .iter()
        .zip(&state.choices)
        .all(|(&st, &c)| c != Choice::Mb3d || allows_3d(st))
}

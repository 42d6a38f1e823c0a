//! MetaPath super-network: every slot mixes its candidate blocks with
//! Gumbel-softmax weights over learned logits.

mod gumbel;

pub use gumbel::{branch_weights, branch_weights_var, branch_weights_with_noise, sample_noise, GumbelConfig, NoiseKind};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    embed, global_pool, preset_layout, ArchError, ArchSpec, Block, BlockSpec, EmbeddingSpec, HeadSpec, Layout, Model,
    StageModule, StageSpec, MIN_WIDTH, NUM_STAGES, SCHEMA_VERSION,
};
use crate::nn::{
    linear, patch_embed, Embedding, Feature, Graph, LinearParams, Mb3d, Mb4d, Norm4d, ParamBuilder, ParamId,
    ParamKind, ParamStore, Stem, Transfer,
};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Activation, Result, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum SupernetError {
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
    #[error("supernet checkpoint metadata: {0}")]
    Metadata(String),
}

/// Branch kind inside a MetaPath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Mb4d,
    Mb3d,
    Identity,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Mb4d => "mb4d",
            Choice::Mb3d => "mb3d",
            Choice::Identity => "identity",
        }
    }
}

/// Whether stage `j` (0-based) may hold MB3D blocks.
pub fn allows_3d(stage: usize) -> bool {
    stage >= 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaPath {
    pub stage: usize,
    pub block: usize,
    pub candidates: Vec<Choice>,
    /// One logit per candidate, in `candidates` order.
    pub alpha: ParamId,
    pub mb4d: Mb4d,
    pub mb3d: Option<Mb3d>,
}

impl MetaPath {
    pub fn position(&self, c: Choice) -> Option<usize> {
        self.candidates.iter().position(|&k| k == c)
    }
}

/// A concrete choice per MetaPath plus stage widths.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub choices: Vec<Choice>,
    pub widths: [usize; NUM_STAGES],
}

impl Selection {
    /// The skeleton's own layout: its last `n_3d` slots MB3D, the rest MB4D.
    pub fn from_layout(layout: &Layout) -> Selection {
        let total: usize = layout.depths.iter().sum();
        let first_3d = total.saturating_sub(layout.n_3d);
        Selection {
            choices: (0..total)
                .map(|i| if i >= first_3d { Choice::Mb3d } else { Choice::Mb4d })
                .collect(),
            widths: layout.widths,
        }
    }
}

/// Layout of a search skeleton: a preset with every stage 3-4 slot able to
/// start as MB3D.
pub fn search_layout(name: &str) -> std::result::Result<Layout, ArchError> {
    let mut l = preset_layout(name)?;
    l.n_3d = l.depths[2] + l.depths[3];
    Ok(l)
}

/// Stage index of every MetaPath, in order.
pub fn path_stages(layout: &Layout) -> Vec<usize> {
    (0..NUM_STAGES).flat_map(|j| std::iter::repeat_n(j, layout.depths[j])).collect()
}

/// Materializes a selection on a skeleton; identity slots are dropped.
pub fn derive_arch(layout: &Layout, sel: &Selection) -> std::result::Result<ArchSpec, SupernetError> {
    let stages_of = path_stages(layout);
    if sel.choices.len() != stages_of.len() {
        return Err(SupernetError::Selection(format!(
            "{} choices for {} MetaPaths",
            sel.choices.len(),
            stages_of.len()
        )));
    }
    for (j, &w) in sel.widths.iter().enumerate() {
        if w < MIN_WIDTH || w > layout.widths[j] || w % 16 != 0 {
            return Err(SupernetError::Selection(format!(
                "stage {} width {w} outside multiples of 16 in [{MIN_WIDTH}, {}]",
                j + 1,
                layout.widths[j]
            )));
        }
    }
    let mut stages: Vec<StageSpec> = (0..NUM_STAGES)
        .map(|j| StageSpec {
            width: sel.widths[j],
            embedding: (j > 0).then(EmbeddingSpec::default),
            blocks: Vec::new(),
        })
        .collect();
    for (&c, &j) in sel.choices.iter().zip(&stages_of) {
        let width = sel.widths[j];
        let b = match c {
            Choice::Mb4d => BlockSpec::Mb4d { width, exp: layout.exp },
            Choice::Mb3d if allows_3d(j) => BlockSpec::Mb3d {
                width,
                heads: layout.heads,
                d_qk: layout.d_qk,
                d_v: layout.d_v,
                exp: layout.exp,
            },
            Choice::Mb3d => {
                return Err(SupernetError::Selection(format!("MB3D chosen in stage {}", j + 1)));
            }
            Choice::Identity => continue,
        };
        stages[j].blocks.push(b);
    }
    let spec = ArchSpec {
        schema_version: SCHEMA_VERSION.to_string(),
        name: Some(layout.name.clone()),
        resolution: layout.resolution,
        stem: layout.stem,
        stages,
        head: HeadSpec { classes: layout.classes },
        activation: Activation::Gelu,
        norm_4d: Norm4d::Bn,
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// Per-path overrides used to simulate slimming actions during evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Simulation {
    /// Forced one-hot choice per MetaPath (`None` = mixed).
    pub forced: Vec<Option<Choice>>,
    /// Channel keep-mask per stage (`None` = all channels).
    pub masks: Vec<Option<Vec<f32>>>,
}

impl Simulation {
    pub fn none(paths: usize) -> Simulation {
        Simulation {
            forced: vec![None; paths],
            masks: vec![None; NUM_STAGES],
        }
    }

    /// Forces every path to its selected choice and masks reduced widths.
    pub fn from_selection(sn: &SuperNet, sel: &Selection) -> Simulation {
        Simulation {
            forced: sel.choices.iter().map(|&c| Some(c)).collect(),
            masks: (0..NUM_STAGES).map(|j| sn.width_mask(j, sel.widths[j])).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Importance {
    pub per_path: Vec<f32>,
    pub per_stage: [f32; NUM_STAGES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNet {
    pub layout: Layout,
    pub store: ParamStore,
    pub stem: Stem,
    pub embeddings: Vec<Option<Embedding>>,
    pub paths: Vec<MetaPath>,
    pub head: LinearParams,
}

impl SuperNet {
    /// Builds the skeleton at maximal widths and depths; alphas start at 0.
    pub fn new(layout: &Layout, seed: u64) -> std::result::Result<SuperNet, SupernetError> {
        let probe = derive_arch(layout, &Selection::from_layout(layout))?;
        probe.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let act = Activation::Gelu;
        let stem = b.scoped("stem", |b| Stem::new(b, layout.stem, act));
        let mut embeddings = Vec::new();
        let mut paths = Vec::new();
        let mut c_prev = layout.stem[1];
        for j in 0..NUM_STAGES {
            let width = layout.widths[j];
            let side = layout.resolution >> (j + 2);
            b.scoped(&format!("stages.{j}"), |b| {
                embeddings.push((j > 0).then(|| b.scoped("embed", |b| Embedding::new(b, c_prev, width))));
                for i in 0..layout.depths[j] {
                    paths.push(b.scoped(&format!("paths.{i}"), |b| {
                        let mb4d = b.scoped("mb4d", |b| Mb4d::new(b, width, layout.exp, act, Norm4d::Bn));
                        let mb3d = allows_3d(j).then(|| {
                            b.scoped("mb3d", |b| {
                                Mb3d::new(b, width, layout.heads, layout.d_qk, layout.d_v, layout.exp, side * side, act)
                            })
                        });
                        let candidates = if mb3d.is_some() {
                            vec![Choice::Mb4d, Choice::Mb3d, Choice::Identity]
                        } else {
                            vec![Choice::Mb4d, Choice::Identity]
                        };
                        let alpha = b.add("alpha", Tensor::zeros(&[candidates.len()]), ParamKind::Arch);
                        MetaPath {
                            stage: j,
                            block: i,
                            candidates,
                            alpha,
                            mb4d,
                            mb3d,
                        }
                    }));
                }
            });
            c_prev = width;
        }
        let head = b.scoped("head", |b| b.linear(c_prev, layout.classes));
        Ok(SuperNet {
            layout: layout.clone(),
            store,
            stem,
            embeddings,
            paths,
            head,
        })
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        self.paths.iter().map(|p| p.alpha).collect()
    }

    pub fn alpha(&self, path: usize) -> &[f32] {
        self.store.get(self.paths[path].alpha).data()
    }

    pub fn set_alpha(&mut self, path: usize, values: &[f32]) {
        self.store.get_mut(self.paths[path].alpha).data_mut().copy_from_slice(values);
    }

    /// Weight tensor whose per-output-channel L1 norms rank the channels of
    /// stage `j`: the embedding conv, or the stem's last conv for stage 1.
    fn stage_out_weight(&self, j: usize) -> &Tensor {
        let id = match &self.embeddings[j] {
            Some(e) => e.conv.conv.weight,
            None => self.stem.conv2.conv.weight,
        };
        self.store.get(id)
    }

    /// Keep-mask zeroing the `full - width` lowest-L1 channels of stage `j`.
    /// Ties go to the lower channel index being dropped first.
    pub fn width_mask(&self, j: usize, width: usize) -> Option<Vec<f32>> {
        let full = self.layout.widths[j];
        if width >= full {
            return None;
        }
        let w = self.stage_out_weight(j);
        let per = w.len() / full;
        let norms: Vec<f32> = w.data().chunks(per).map(|c| c.iter().map(|v| v.abs()).sum()).collect();
        let mut order: Vec<usize> = (0..full).collect();
        order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
        let mut mask = vec![1.0; full];
        for &c in &order[..full - width] {
            mask[c] = 0.0;
        }
        Some(mask)
    }

    /// Forward with every MetaPath mixing its branches. Features switch to
    /// tokens at the first stage-3 MetaPath and stay there (embeddings
    /// reshape temporarily).
    pub fn sample_forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: Var,
        cfg: &GumbelConfig,
        rng: &mut R,
        sim: &Simulation,
    ) -> Result<Var> {
        cfg.check()?;
        let mut f = Feature::Spatial(patch_embed(g, x, &self.stem)?);
        let mut p = 0;
        for j in 0..NUM_STAGES {
            if let Some(e) = &self.embeddings[j] {
                f = embed(g, e, f)?;
            }
            let mask = sim.masks.get(j).and_then(|m| m.as_deref());
            f = apply_mask(g, f, mask)?;
            if allows_3d(j) {
                f = f.to_tokens(g)?;
            }
            for _ in 0..self.layout.depths[j] {
                let forced = sim.forced.get(p).copied().flatten();
                f = self.path_forward(g, p, f, cfg, rng, forced)?;
                f = apply_mask(g, f, mask)?;
                p += 1;
            }
        }
        let pooled = global_pool(g, f)?;
        linear(g, pooled, &self.head)
    }

    fn branch(&self, g: &mut Graph, path: &MetaPath, c: Choice, f: Feature) -> Result<Feature> {
        match c {
            Choice::Identity => Ok(f),
            Choice::Mb4d => Block::Mb4d(path.mb4d.clone()).forward(g, f),
            Choice::Mb3d => match &path.mb3d {
                Some(b) => Block::Mb3d(b.clone()).forward(g, f),
                None => Err(TensorError::invalid("sample_forward", "MB3D forced in an early stage")),
            },
        }
    }

    fn path_forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: usize,
        f: Feature,
        cfg: &GumbelConfig,
        rng: &mut R,
        forced: Option<Choice>,
    ) -> Result<Feature> {
        let path = &self.paths[p];
        if let Some(c) = forced {
            return self.branch(g, path, c, f);
        }
        if path.candidates.len() == 1 {
            return self.branch(g, path, path.candidates[0], f);
        }
        let alpha = g.param(path.alpha)?;
        let noise = sample_noise(cfg.noise, path.candidates.len(), rng);
        let w = branch_weights_var(g, alpha, &noise, cfg.tau)?;
        let mut acc: Option<Var> = None;
        for (n, &c) in path.candidates.iter().enumerate() {
            let out = self.branch(g, path, c, f)?.var();
            let wn = g.tape.index(w, n)?;
            let term = g.tape.mul(out, wn)?;
            acc = Some(match acc {
                Some(a) => g.tape.add(a, term)?,
                None => term,
            });
        }
        let x = acc.expect("at least one candidate");
        Ok(match f {
            Feature::Spatial(_) => Feature::Spatial(x),
            Feature::Tokens { h, w, .. } => Feature::Tokens { x, h, w },
        })
    }

    /// Logits in eval mode, no gradients.
    pub fn eval_logits<R: Rng>(&self, x: &Tensor, cfg: &GumbelConfig, rng: &mut R, sim: &Simulation) -> Result<Tensor> {
        let mut g = Graph::eval(&self.store);
        let xv = g.input(x.detached())?;
        let y = self.sample_forward(&mut g, xv, cfg, rng, sim)?;
        Ok(g.value(y).detached())
    }

    /// `softplus(α)` ratios of non-identity to identity branches, and their
    /// per-stage sums.
    pub fn importance_scores(&self) -> Importance {
        let mut imp = Importance::default();
        for path in &self.paths {
            let a = self.store.get(path.alpha).data();
            let sp = |c: Choice| path.position(c).map_or(0.0, |i| softplus(a[i]));
            let s = (sp(Choice::Mb4d) + sp(Choice::Mb3d)) / sp(Choice::Identity).max(f32::MIN_POSITIVE);
            imp.per_path.push(s);
            imp.per_stage[path.stage] += s;
        }
        imp
    }

    /// Concrete spec for a selection.
    pub fn derive_arch(&self, sel: &Selection) -> std::result::Result<ArchSpec, SupernetError> {
        derive_arch(&self.layout, sel)
    }

    /// Standalone model sharing this supernet's weights for a full-width
    /// selection.
    pub fn extract(&self, sel: &Selection) -> std::result::Result<Model, SupernetError> {
        if sel.widths != self.layout.widths {
            return Err(SupernetError::Selection("extraction needs full stage widths".into()));
        }
        let spec = self.derive_arch(sel)?;
        let mut store = ParamStore::new();
        let mut t = Transfer {
            src: &self.store,
            dst: &mut store,
            fold_bn: false,
        };
        let stem = self.stem.transfer(&mut t)?;
        let mut stages: Vec<StageModule> = self
            .embeddings
            .iter()
            .map(|e| {
                Ok(StageModule {
                    embedding: e.as_ref().map(|e| e.transfer(&mut t)).transpose()?,
                    blocks: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        for (path, &c) in self.paths.iter().zip(&sel.choices) {
            let blk = match c {
                Choice::Mb4d => Block::Mb4d(path.mb4d.transfer(&mut t)?),
                Choice::Mb3d => Block::Mb3d(path.mb3d.as_ref().expect("validated").transfer(&mut t)),
                Choice::Identity => continue,
            };
            let st = &mut stages[path.stage];
            let idx = st.blocks.len();
            st.blocks.push((idx, blk));
        }
        let head = t.linear(&self.head);
        Ok(Model {
            spec,
            store,
            stem,
            stages,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.layout).expect("layout serializes");
        self.store.to_checkpoint().with_metadata(meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<SuperNet, SupernetError> {
        let meta = ck
            .metadata
            .as_deref()
            .ok_or_else(|| SupernetError::Metadata("missing skeleton section".into()))?;
        let layout: Layout = serde_json::from_str(meta).map_err(|e| SupernetError::Metadata(e.to_string()))?;
        let mut sn = SuperNet::new(&layout, 0)?;
        sn.store.load_checkpoint(ck)?;
        Ok(sn)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), SupernetError> {
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<SuperNet, SupernetError> {
        SuperNet::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn apply_mask(g: &mut Graph, f: Feature, mask: Option<&[f32]>) -> Result<Feature> {
    let Some(m) = mask else {
        return Ok(f);
    };
    let c = m.len();
    Ok(match f {
        Feature::Spatial(x) => {
            let mv = g.input(Tensor::new(vec![c, 1, 1], m.to_vec())?)?;
            Feature::Spatial(g.tape.mul(x, mv)?)
        }
        Feature::Tokens { x, h, w } => {
            let mv = g.input(Tensor::new(vec![c], m.to_vec())?)?;
            Feature::Tokens { x: g.tape.mul(x, mv)?, h, w }
        }
    })
}

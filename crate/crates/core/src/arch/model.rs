//! Runnable network built from an [`ArchSpec`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchError, ArchSpec, BlockSpec};
use crate::nn::{
    linear, patch_embed, Embedding, Feature, Graph, LinearParams, Mb3d, Mb4d, ParamBuilder, ParamStore, Stem,
    Transfer,
};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Result, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Mb4d(Mb4d),
    Mb3d(Mb3d),
}

impl Block {
    /// Builds a block for a stage of side `side`; `None` for identities.
    pub fn build<R: rand::Rng>(
        b: &mut ParamBuilder<R>,
        spec: &BlockSpec,
        side: usize,
        arch: &ArchSpec,
    ) -> Option<Block> {
        match *spec {
            BlockSpec::Mb4d { width, exp } => Some(Block::Mb4d(Mb4d::new(b, width, exp, arch.activation, arch.norm_4d))),
            BlockSpec::Mb3d { width, heads, d_qk, d_v, exp } => Some(Block::Mb3d(Mb3d::new(
                b,
                width,
                heads,
                d_qk,
                d_v,
                exp,
                side * side,
                arch.activation,
            ))),
            BlockSpec::Identity => None,
        }
    }

    /// Runs the block, converting the layout first if needed.
    pub fn forward(&self, g: &mut Graph, f: Feature) -> Result<Feature> {
        match self {
            Block::Mb4d(b) => match f {
                Feature::Spatial(x) => Ok(Feature::Spatial(b.forward(g, x)?)),
                // 4D block inside the 3D partition: reshape in and out.
                Feature::Tokens { .. } => {
                    let x = f.to_spatial(g)?.var();
                    Feature::Spatial(b.forward(g, x)?).to_tokens(g)
                }
            },
            Block::Mb3d(b) => {
                let Feature::Tokens { x, h, w } = f.to_tokens(g)? else {
                    unreachable!("to_tokens returns tokens")
                };
                Ok(Feature::Tokens { x: b.forward(g, x)?, h, w })
            }
        }
    }

    pub fn transfer(&self, t: &mut Transfer) -> Result<Block> {
        Ok(match self {
            Block::Mb4d(b) => Block::Mb4d(b.transfer(t)?),
            Block::Mb3d(b) => Block::Mb3d(b.transfer(t)),
        })
    }
}

/// Embedding (if any) followed by the stage's blocks as `(index, block)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModule {
    pub embedding: Option<Embedding>,
    pub blocks: Vec<(usize, Block)>,
}

/// Mean over spatial positions or tokens: `[B, C]`.
pub fn global_pool(g: &mut Graph, f: Feature) -> Result<Var> {
    match f {
        Feature::Spatial(x) => {
            let s = g.tape.shape(x).to_vec();
            let r = g.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
            g.tape.mean_axis(r, 2)
        }
        Feature::Tokens { x, .. } => g.tape.mean_axis(x, 1),
    }
}

/// Embedding conv on a feature in either layout; returns spatial output.
pub fn embed(g: &mut Graph, e: &Embedding, f: Feature) -> Result<Feature> {
    let x = f.to_spatial(g)?.var();
    Ok(Feature::Spatial(e.forward(g, x)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub store: ParamStore,
    pub stem: Stem,
    pub stages: Vec<StageModule>,
    pub head: LinearParams,
}

impl Model {
    /// Allocates and initializes every parameter from `seed`.
    pub fn instantiate(spec: &ArchSpec, seed: u64) -> std::result::Result<Model, ArchError> {
        spec.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let stem = b.scoped("stem", |b| Stem::new(b, spec.stem, spec.activation));
        let mut c_prev = spec.stem[1];
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (j, st) in spec.stages.iter().enumerate() {
            let side = spec.stage_side(j);
            let module = b.scoped(&format!("stages.{j}"), |b| {
                let embedding = st
                    .embedding
                    .as_ref()
                    .map(|_| b.scoped("embed", |b| Embedding::new(b, c_prev, st.width)));
                let blocks = st
                    .blocks
                    .iter()
                    .enumerate()
                    .filter_map(|(i, bs)| {
                        b.scoped(&format!("blocks.{i}"), |b| Block::build(b, bs, side, spec))
                            .map(|blk| (i, blk))
                    })
                    .collect();
                StageModule { embedding, blocks }
            });
            stages.push(module);
            c_prev = st.width;
        }
        let head = b.scoped("head", |b| b.linear(c_prev, spec.head.classes));
        Ok(Model {
            spec: spec.clone(),
            store,
            stem,
            stages,
            head,
        })
    }

    /// Logits `[B, classes]` for an image batch `[B, 3, R, R]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut f = Feature::Spatial(patch_embed(g, x, &self.stem)?);
        for st in &self.stages {
            if let Some(e) = &st.embedding {
                f = embed(g, e, f)?;
            }
            for (_, blk) in &st.blocks {
                f = blk.forward(g, f)?;
            }
        }
        let pooled = global_pool(g, f)?;
        linear(g, pooled, &self.head)
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval(&self.store);
        let xv = g.input(x.detached())?;
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).detached())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Copy of the model with every conv-BN pair folded into one conv.
    pub fn fold_bn(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        let mut t = Transfer {
            src: &self.store,
            dst: &mut store,
            fold_bn: true,
        };
        let stem = self.stem.transfer(&mut t)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let embedding = st.embedding.as_ref().map(|e| e.transfer(&mut t)).transpose()?;
            let blocks = st
                .blocks
                .iter()
                .map(|(i, b)| Ok((*i, b.transfer(&mut t)?)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageModule { embedding, blocks });
        }
        let head = t.linear(&self.head);
        Ok(Model {
            spec: self.spec.clone(),
            store,
            stem,
            stages,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint().with_metadata(self.spec.to_json())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), ArchError> {
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint carrying its spec as metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Model, ArchError> {
        let meta = ck.metadata.as_deref().ok_or_else(|| ArchError::Json {
            path: ".".into(),
            message: "checkpoint has no architecture metadata".into(),
        })?;
        let spec = ArchSpec::from_json(meta)?;
        let mut m = Model::instantiate(&spec, 0)?;
        m.store.load_checkpoint(ck)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Model, ArchError> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Index of the largest entry in each row of a `[B, K]` tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[t.rank() - 1];
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

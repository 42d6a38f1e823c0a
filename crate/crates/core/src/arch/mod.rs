//! Concrete architecture descriptions: validation of the dimension-consistent
//! layout, the L1/L3/L7 presets, parameter and MAC accounting, and the
//! versioned JSON schema.

mod cost;
mod model;

pub use cost::{block_counts, count_buffers, count_macs, count_params, Component, ComponentKey, ComponentKind};
pub use model::{argmax_rows, embed, global_pool, Block, Model, StageModule};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::Norm4d;
use crate::tensor::{Activation, TensorError};

pub const SCHEMA_VERSION: &str = "v1";
pub const NUM_STAGES: usize = 4;
pub const MIN_WIDTH: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error("invalid architecture:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown preset {0:?} (expected L1, L3, L7 or toy)")]
    UnknownPreset(String),
    #[error("architecture JSON error at {path}: {message}")]
    Json { path: String, message: String },
    #[error("unsupported schema version {0:?} (expected \"v1\")")]
    SchemaVersion(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum BlockSpec {
    #[serde(rename = "mb4d")]
    Mb4d { width: usize, exp: usize },
    #[serde(rename = "mb3d")]
    Mb3d {
        width: usize,
        heads: usize,
        d_qk: usize,
        d_v: usize,
        exp: usize,
    },
    #[serde(rename = "identity")]
    Identity,
}

impl BlockSpec {
    pub fn width(&self) -> Option<usize> {
        match self {
            BlockSpec::Mb4d { width, .. } | BlockSpec::Mb3d { width, .. } => Some(*width),
            BlockSpec::Identity => None,
        }
    }

    pub fn is_3d(&self) -> bool {
        matches!(self, BlockSpec::Mb3d { .. })
    }

    pub fn is_4d(&self) -> bool {
        matches!(self, BlockSpec::Mb4d { .. })
    }

    /// Same block kind at another width.
    pub fn with_width(&self, w: usize) -> BlockSpec {
        match *self {
            BlockSpec::Mb4d { exp, .. } => BlockSpec::Mb4d { width: w, exp },
            BlockSpec::Mb3d { heads, d_qk, d_v, exp, .. } => BlockSpec::Mb3d {
                width: w,
                heads,
                d_qk,
                d_v,
                exp,
            },
            BlockSpec::Identity => BlockSpec::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec { kernel: 3, stride: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub width: usize,
    #[serde(default)]
    pub embedding: Option<EmbeddingSpec>,
    pub blocks: Vec<BlockSpec>,
}

impl StageSpec {
    pub fn count_4d(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_4d()).count()
    }

    pub fn count_3d(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_3d()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Square input side length.
    pub resolution: usize,
    /// Output widths of the two stem convolutions.
    pub stem: [usize; 2],
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub norm_4d: Norm4d,
}

/// Compact description from which presets and supernet skeletons are built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub name: String,
    pub resolution: usize,
    pub stem: [usize; 2],
    pub widths: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    /// The last `n_3d` blocks of the network are MB3D.
    pub n_3d: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub exp: usize,
    pub classes: usize,
}

impl Layout {
    pub fn to_spec(&self) -> ArchSpec {
        let total: usize = self.depths.iter().sum();
        let first_3d = total.saturating_sub(self.n_3d);
        let mut idx = 0;
        let stages = (0..NUM_STAGES)
            .map(|j| {
                let width = self.widths[j];
                let blocks = (0..self.depths[j])
                    .map(|_| {
                        let b = if idx >= first_3d {
                            BlockSpec::Mb3d {
                                width,
                                heads: self.heads,
                                d_qk: self.d_qk,
                                d_v: self.d_v,
                                exp: self.exp,
                            }
                        } else {
                            BlockSpec::Mb4d { width, exp: self.exp }
                        };
                        idx += 1;
                        b
                    })
                    .collect();
                StageSpec {
                    width,
                    embedding: (j > 0).then(EmbeddingSpec::default),
                    blocks,
                }
            })
            .collect();
        ArchSpec {
            schema_version: SCHEMA_VERSION.to_string(),
            name: Some(self.name.clone()),
            resolution: self.resolution,
            stem: self.stem,
            stages,
            head: HeadSpec { classes: self.classes },
            activation: Activation::Gelu,
            norm_4d: Norm4d::Bn,
        }
    }
}

/// Named layouts (l1, l3, l7). `toy` is a desk-scale layout for 64x64 inputs.
pub fn preset_layout(name: &str) -> Result<Layout, ArchError> {
    let base = |name: &str, stem, widths, depths, n_3d| Layout {
        name: name.to_string(),
        resolution: 224,
        stem,
        widths,
        depths,
        n_3d,
        heads: 8,
        d_qk: 32,
        d_v: 128,
        exp: 4,
        classes: 1000,
    };
    match name.to_ascii_uppercase().as_str() {
        "L1" => Ok(base("L1", [24, 48], [48, 96, 224, 448], [3, 2, 6, 4], 1)),
        "L3" => Ok(base("L3", [32, 64], [64, 128, 320, 512], [4, 4, 12, 6], 3)),
        // Stage 3 uses 18 blocks; 8 gives roughly 20% fewer parameters.
        "L7" => Ok(base("L7", [48, 96], [96, 192, 384, 768], [6, 6, 18, 8], 8)),
        "TOY" => Ok(Layout {
            name: "toy".into(),
            resolution: 64,
            stem: [8, 16],
            widths: [16, 32, 48, 64],
            depths: [2, 2, 2, 2],
            n_3d: 1,
            heads: 2,
            d_qk: 16,
            d_v: 32,
            exp: 4,
            classes: 4,
        }),
        _ => Err(ArchError::UnknownPreset(name.to_string())),
    }
}

pub fn preset(name: &str) -> Result<ArchSpec, ArchError> {
    Ok(preset_layout(name)?.to_spec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    StageCount,
    Resolution,
    Width,
    WidthMismatch,
    EarlyMb3d,
    DimensionInconsistency,
    Embedding,
    BlockParameter,
    Head,
    Schema,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn ensure_valid(&self) -> Result<(), ArchError> {
        self.validate().map_err(ArchError::Invalid)
    }

    /// Total number of non-identity blocks.
    pub fn depth(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.blocks.iter().filter(|b| b.width().is_some()).count())
            .sum()
    }

    pub fn count_3d(&self) -> usize {
        self.stages.iter().map(StageSpec::count_3d).sum()
    }

    /// Feature side length inside stage `j` (0-based).
    pub fn stage_side(&self, j: usize) -> usize {
        self.resolution >> (j + 2)
    }

    /// Same spec with identity blocks removed.
    pub fn without_identities(&self) -> ArchSpec {
        let mut s = self.clone();
        for st in &mut s.stages {
            st.blocks.retain(|b| b.width().is_some());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<ArchSpec, ArchError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: ArchSpec = serde_path_to_error::deserialize(de).map_err(|e| ArchError::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if spec.schema_version != SCHEMA_VERSION {
            return Err(ArchError::SchemaVersion(spec.schema_version));
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<ArchSpec, ArchError> {
        ArchSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ArchError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Checks every structural rule; never panics.
pub fn validate(spec: &ArchSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, path: String, message: String| out.push(Violation { kind, path, message });
    if spec.schema_version != SCHEMA_VERSION {
        push(
            ViolationKind::Schema,
            "schema_version".into(),
            format!("expected {SCHEMA_VERSION:?}, got {:?}", spec.schema_version),
        );
    }
    if spec.resolution == 0 || spec.resolution % 32 != 0 {
        push(
            ViolationKind::Resolution,
            "resolution".into(),
            format!("input resolution {} is not a positive multiple of 32", spec.resolution),
        );
    }
    if spec.stem.contains(&0) {
        push(ViolationKind::Width, "stem".into(), "stem widths must be positive".into());
    }
    if spec.head.classes == 0 {
        push(ViolationKind::Head, "head.classes".into(), "at least one class required".into());
    }
    if spec.stages.len() != NUM_STAGES {
        push(
            ViolationKind::StageCount,
            "stages".into(),
            format!("expected exactly {NUM_STAGES} stages, got {}", spec.stages.len()),
        );
    }
    let mut seen_3d_late = false;
    for (j, stage) in spec.stages.iter().enumerate() {
        let sp = format!("stages[{j}]");
        if stage.width < MIN_WIDTH {
            push(
                ViolationKind::Width,
                format!("{sp}.width"),
                format!("width {} below minimum {MIN_WIDTH}", stage.width),
            );
        }
        match (&stage.embedding, j) {
            (Some(_), 0) => push(
                ViolationKind::Embedding,
                format!("{sp}.embedding"),
                "first stage takes the stem output directly and has no embedding".into(),
            ),
            (None, j) if j > 0 => push(
                ViolationKind::Embedding,
                format!("{sp}.embedding"),
                "stages 2-4 need a stride-2 embedding".into(),
            ),
            (Some(e), _) if e.kernel != 3 || e.stride != 2 => push(
                ViolationKind::Embedding,
                format!("{sp}.embedding"),
                format!("embedding must be kernel 3 stride 2, got kernel {} stride {}", e.kernel, e.stride),
            ),
            _ => {}
        }
        for (i, b) in stage.blocks.iter().enumerate() {
            let bp = format!("{sp}.blocks[{i}]");
            if let Some(w) = b.width() {
                if w != stage.width {
                    push(
                        ViolationKind::WidthMismatch,
                        bp.clone(),
                        format!("block width {w} differs from stage width {}", stage.width),
                    );
                }
            }
            match *b {
                BlockSpec::Mb4d { exp, .. } => {
                    if exp == 0 {
                        push(ViolationKind::BlockParameter, bp.clone(), "expansion must be positive".into());
                    }
                    if seen_3d_late {
                        push(
                            ViolationKind::DimensionInconsistency,
                            bp,
                            "dimension inconsistency: MB4D block after an MB3D block".into(),
                        );
                    }
                }
                BlockSpec::Mb3d { heads, d_qk, d_v, exp, .. } => {
                    if heads == 0 || d_qk == 0 || d_v == 0 || exp == 0 {
                        push(
                            ViolationKind::BlockParameter,
                            bp.clone(),
                            "heads, d_qk, d_v and exp must be positive".into(),
                        );
                    }
                    if j < 2 {
                        push(
                            ViolationKind::EarlyMb3d,
                            bp,
                            "3D block in early stage (MB3D is only allowed in stages 3 and 4)".into(),
                        );
                    } else {
                        seen_3d_late = true;
                    }
                }
                BlockSpec::Identity => {}
            }
        }
    }
    out
}

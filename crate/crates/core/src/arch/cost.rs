//! Per-component parameter, buffer and MAC accounting.
//!
//! Every count is derived from one list of components, so totals are sums by
//! construction and the latency estimator keys on the same list.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ArchError, ArchSpec, BlockSpec};
use crate::nn::Norm4d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Stem,
    Embed,
    Mb4d,
    Mb3d,
    Head,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Stem,
        ComponentKind::Embed,
        ComponentKind::Mb4d,
        ComponentKind::Mb3d,
        ComponentKind::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Stem => "stem",
            ComponentKind::Embed => "embed",
            ComponentKind::Mb4d => "mb4d",
            ComponentKind::Mb3d => "mb3d",
            ComponentKind::Head => "head",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown component kind {s:?}"))
    }
}

/// Lookup key of one network component.
///
/// `width` is the output width. `exp` is the MLP expansion for blocks and
/// the auxiliary size otherwise: input width for `Embed`, first conv width
/// for `Stem`, class count for `Head`. `resolution` is the side length the
/// component runs at: input side for `Stem`, output side for `Embed`, stage
/// side for blocks and the last stage side for `Head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentKey {
    pub kind: ComponentKind,
    pub width: usize,
    pub resolution: usize,
    pub exp: usize,
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(w={}, res={}, exp={})", self.kind, self.width, self.resolution, self.exp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub key: ComponentKey,
    /// Stage index for embeddings and blocks.
    pub stage: Option<usize>,
    /// Block index within the stage (identities included).
    pub block: Option<usize>,
    pub params: usize,
    pub buffers: usize,
    pub macs: u64,
}

fn conv_bn_counts(cin: usize, cout: usize, k: usize, side_out: usize) -> (usize, usize, u64) {
    let params = cin * cout * k * k + cout + 2 * cout;
    let macs = (cin * cout * k * k * side_out * side_out) as u64;
    (params, 2 * cout, macs)
}

/// Counts for a single block at feature side `side`.
pub fn block_counts(b: &BlockSpec, side: usize, norm: Norm4d) -> (usize, usize, u64) {
    let hw = side * side;
    match *b {
        BlockSpec::Mb4d { width: c, exp } => {
            let h = c * exp;
            let convs = c * h + h + h * c + c;
            let macs = (2 * c * h * hw) as u64;
            match norm {
                Norm4d::Bn => (convs + 2 * h + 2 * c, 2 * h + 2 * c, macs),
                Norm4d::Gn | Norm4d::Ln => (convs + 4 * c, 0, macs),
            }
        }
        BlockSpec::Mb3d { width: c, heads, d_qk, d_v, exp } => {
            let qk = heads * d_qk;
            let v = heads * d_v;
            let h = c * exp;
            let params = 2 * c
                + 2 * (c * qk + qk)
                + (c * v + v)
                + (v * c + c)
                + heads * hw * hw
                + 2 * c
                + (c * h + h)
                + (h * c + c);
            let n = hw;
            let macs = n * c * (2 * qk + v) + heads * n * n * (d_qk + d_v) + n * v * c + 2 * n * c * h;
            (params, 0, macs as u64)
        }
        BlockSpec::Identity => (0, 0, 0),
    }
}

impl ArchSpec {
    /// Stem, embeddings, non-identity blocks and head, in execution order.
    /// Assumes a spec that passes validation.
    pub fn components(&self) -> Vec<Component> {
        let mut out = Vec::new();
        let r = self.resolution;
        let [w0, w1] = self.stem;
        let (p1, b1, m1) = conv_bn_counts(3, w0, 3, r / 2);
        let (p2, b2, m2) = conv_bn_counts(w0, w1, 3, r / 4);
        out.push(Component {
            key: ComponentKey { kind: ComponentKind::Stem, width: w1, resolution: r, exp: w0 },
            stage: None,
            block: None,
            params: p1 + p2,
            buffers: b1 + b2,
            macs: m1 + m2,
        });
        let mut c_prev = w1;
        for (j, st) in self.stages.iter().enumerate() {
            let side = self.stage_side(j);
            if st.embedding.is_some() {
                let (p, b, m) = conv_bn_counts(c_prev, st.width, 3, side);
                out.push(Component {
                    key: ComponentKey { kind: ComponentKind::Embed, width: st.width, resolution: side, exp: c_prev },
                    stage: Some(j),
                    block: None,
                    params: p,
                    buffers: b,
                    macs: m,
                });
            }
            for (i, blk) in st.blocks.iter().enumerate() {
                let (kind, exp) = match *blk {
                    BlockSpec::Mb4d { exp, .. } => (ComponentKind::Mb4d, exp),
                    BlockSpec::Mb3d { exp, .. } => (ComponentKind::Mb3d, exp),
                    BlockSpec::Identity => continue,
                };
                let (p, b, m) = block_counts(blk, side, self.norm_4d);
                out.push(Component {
                    key: ComponentKey { kind, width: st.width, resolution: side, exp },
                    stage: Some(j),
                    block: Some(i),
                    params: p,
                    buffers: b,
                    macs: m,
                });
            }
            c_prev = st.width;
        }
        let k = self.head.classes;
        out.push(Component {
            key: ComponentKey {
                kind: ComponentKind::Head,
                width: c_prev,
                resolution: self.stage_side(self.stages.len().saturating_sub(1)),
                exp: k,
            },
            stage: None,
            block: None,
            params: c_prev * k + k,
            buffers: 0,
            macs: (c_prev * k) as u64,
        });
        out
    }

    /// Per-stage `(params, macs)` including the stage's embedding.
    pub fn stage_breakdown(&self) -> Vec<(usize, u64)> {
        let mut out = vec![(0, 0); self.stages.len()];
        for c in self.components() {
            if let Some(j) = c.stage {
                out[j].0 += c.params;
                out[j].1 += c.macs;
            }
        }
        out
    }
}

fn checked(spec: &ArchSpec) -> Result<Vec<Component>, ArchError> {
    spec.ensure_valid()?;
    Ok(spec.components())
}

/// Trainable parameters: conv and linear weights and biases, BN and LN
/// affines, attention bias tables and the classifier.
pub fn count_params(spec: &ArchSpec) -> Result<usize, ArchError> {
    Ok(checked(spec)?.iter().map(|c| c.params).sum())
}

/// BN running statistics, stored with the model but not trained.
pub fn count_buffers(spec: &ArchSpec) -> Result<usize, ArchError> {
    Ok(checked(spec)?.iter().map(|c| c.buffers).sum())
}

/// Per-image multiply-accumulates at the spec's resolution. Pooling, norms
/// and activations count as zero.
pub fn count_macs(spec: &ArchSpec) -> Result<u64, ArchError> {
    Ok(checked(spec)?.iter().map(|c| c.macs).sum())
}

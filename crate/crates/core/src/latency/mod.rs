//! Per-component latency lookup table: host benchmarking, a synthetic cost
//! model, CSV persistence and whole-network estimation by summation.

mod bench;

pub use bench::{benchmark_block, build_table, build_table_for_keys, measure_model, BenchConfig, Grid, THREADS_ENV};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{block_counts, ArchSpec, BlockSpec, ComponentKey, ComponentKind, Layout, NUM_STAGES};
use crate::nn::Norm4d;

#[derive(Debug, thiserror::Error)]
pub enum LatencyError {
    #[error("latency table has no entry for: {}", .0.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "))]
    MissingKeys(Vec<ComponentKey>),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: u64, key: ComponentKey },
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("benchmark of {key} failed: {message}")]
    Benchmark { key: ComponentKey, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Attention geometry shared by every MB3D key in a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnShape {
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
}

impl AttnShape {
    pub fn of_layout(l: &Layout) -> AttnShape {
        AttnShape {
            heads: l.heads,
            d_qk: l.d_qk,
            d_v: l.d_v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub median_s: f64,
    pub mad_s: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    pub entries: BTreeMap<ComponentKey, LatencyEntry>,
    pub fingerprint: String,
}

pub const SYNTHETIC_FINGERPRINT: &str = "synthetic";

#[derive(Serialize, Deserialize)]
struct Row {
    kind: String,
    width: usize,
    resolution: usize,
    exp: usize,
    median_s: f64,
    mad_s: f64,
    samples: usize,
    fingerprint: String,
}

/// Table read from disk plus anything the caller should surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTable {
    pub table: LatencyTable,
    pub warnings: Vec<String>,
}

impl LatencyTable {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        LatencyTable {
            entries: BTreeMap::new(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ComponentKey) -> Option<&LatencyEntry> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: ComponentKey, e: LatencyEntry) {
        self.entries.insert(key, e);
    }

    pub fn median(&self, key: &ComponentKey) -> Result<f64, LatencyError> {
        self.get(key).map(|e| e.median_s).ok_or(LatencyError::MissingKeys(vec![*key]))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), LatencyError> {
        let mut wr = csv::Writer::from_writer(w);
        for (k, e) in &self.entries {
            wr.serialize(Row {
                kind: k.kind.to_string(),
                width: k.width,
                resolution: k.resolution,
                exp: k.exp,
                median_s: e.median_s,
                mad_s: e.mad_s,
                samples: e.samples,
                fingerprint: self.fingerprint.clone(),
            })?;
        }
        if self.entries.is_empty() {
            wr.write_record(["kind", "width", "resolution", "exp", "median_s", "mad_s", "samples", "fingerprint"])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses a table; a fingerprint differing from `host` (other than the
    /// synthetic marker) produces a warning.
    pub fn read_csv<R: std::io::Read>(r: R, host: &str) -> Result<LoadedTable, LatencyError> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let mut table = LatencyTable::new("");
        let mut fingerprints: Vec<String> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: Row = rec
                .deserialize(Some(&headers))
                .map_err(|e| LatencyError::Malformed { line, message: e.to_string() })?;
            let kind: ComponentKind = row
                .kind
                .parse()
                .map_err(|message| LatencyError::Malformed { line, message })?;
            if !(row.median_s > 0.0 && row.median_s.is_finite()) {
                return Err(LatencyError::Malformed {
                    line,
                    message: format!("median_s must be positive, got {}", row.median_s),
                });
            }
            let key = ComponentKey {
                kind,
                width: row.width,
                resolution: row.resolution,
                exp: row.exp,
            };
            if table.entries.contains_key(&key) {
                return Err(LatencyError::DuplicateKey { line, key });
            }
            table.insert(
                key,
                LatencyEntry {
                    median_s: row.median_s,
                    mad_s: row.mad_s,
                    samples: row.samples,
                },
            );
            if !fingerprints.contains(&row.fingerprint) {
                fingerprints.push(row.fingerprint);
            }
        }
        let mut warnings = Vec::new();
        if fingerprints.len() > 1 {
            warnings.push(format!("table mixes host fingerprints: {}", fingerprints.join(" | ")));
        }
        table.fingerprint = fingerprints.into_iter().next().unwrap_or_default();
        if !table.fingerprint.is_empty() && table.fingerprint != SYNTHETIC_FINGERPRINT && table.fingerprint != host {
            warnings.push(format!(
                "table was measured on {:?}, this host is {:?}; latencies may not transfer",
                table.fingerprint, host
            ));
        }
        Ok(LoadedTable { table, warnings })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), LatencyError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedTable, LatencyError> {
        LatencyTable::read_csv(std::fs::File::open(path)?, &host_fingerprint())
    }
}

/// Sum of table medians over stem, embeddings, blocks and head.
pub fn estimate_latency(spec: &ArchSpec, table: &LatencyTable) -> Result<f64, LatencyError> {
    let mut total = 0.0;
    let mut missing = Vec::new();
    for c in spec.components() {
        match table.get(&c.key) {
            Some(e) => total += e.median_s,
            None if !missing.contains(&c.key) => missing.push(c.key),
            None => {}
        }
    }
    if missing.is_empty() {
        Ok(total)
    } else {
        Err(LatencyError::MissingKeys(missing))
    }
}

/// MACs of a component given only its key.
pub fn key_macs(key: &ComponentKey, attn: AttnShape) -> u64 {
    let conv_bn_macs = |cin: usize, cout: usize, side: usize| (cin * cout * 9 * side * side) as u64;
    let ComponentKey {
        kind,
        width,
        resolution: r,
        exp,
    } = *key;
    match kind {
        ComponentKind::Stem => conv_bn_macs(3, exp, r / 2) + conv_bn_macs(exp, width, r / 4),
        ComponentKind::Embed => conv_bn_macs(exp, width, r),
        ComponentKind::Mb4d => block_counts(&BlockSpec::Mb4d { width, exp }, r, Norm4d::Bn).2,
        ComponentKind::Mb3d => {
            block_counts(
                &BlockSpec::Mb3d {
                    width,
                    heads: attn.heads,
                    d_qk: attn.d_qk,
                    d_v: attn.d_v,
                    exp,
                },
                r,
                Norm4d::Bn,
            )
            .2
        }
        ComponentKind::Head => (width * exp) as u64,
    }
}

/// Deterministic stand-in for measurement: `per_mac · MACs + fixed`, with
/// per-kind constants. Not a measurement of anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCost {
    pub attn: AttnShape,
    /// Seconds per MAC, indexed like [`ComponentKind::ALL`].
    pub per_mac: [f64; 5],
    /// Fixed seconds per component, indexed like [`ComponentKind::ALL`].
    pub fixed: [f64; 5],
}

impl SyntheticCost {
    pub fn new(attn: AttnShape) -> Self {
        SyntheticCost {
            attn,
            // Attention is costed higher per MAC than convolutions.
            per_mac: [1.0e-9, 1.0e-9, 1.0e-9, 2.0e-9, 1.0e-9],
            fixed: [2.0e-5, 1.0e-5, 1.0e-5, 3.0e-5, 5.0e-6],
        }
    }

    fn index(kind: ComponentKind) -> usize {
        ComponentKind::ALL.iter().position(|&k| k == kind).expect("listed")
    }

    pub fn latency(&self, key: &ComponentKey) -> f64 {
        let i = SyntheticCost::index(key.kind);
        self.per_mac[i] * key_macs(key, self.attn) as f64 + self.fixed[i]
    }

    pub fn table(&self, keys: impl IntoIterator<Item = ComponentKey>) -> LatencyTable {
        let mut t = LatencyTable::new(SYNTHETIC_FINGERPRINT);
        for k in keys {
            t.insert(
                k,
                LatencyEntry {
                    median_s: self.latency(&k),
                    mad_s: 0.0,
                    samples: 0,
                },
            );
        }
        t
    }
}

/// Every key a slimming run on `layout` can visit: all multiples of 16 up
/// to each stage's maximal width, for every component kind.
pub fn reachable_keys(layout: &Layout) -> Vec<ComponentKey> {
    let r = layout.resolution;
    let widths = |j: usize| (1..=layout.widths[j] / 16).map(|m| m * 16).collect::<Vec<_>>();
    let mut keys = vec![ComponentKey {
        kind: ComponentKind::Stem,
        width: layout.stem[1],
        resolution: r,
        exp: layout.stem[0],
    }];
    for j in 0..NUM_STAGES {
        let side = r >> (j + 2);
        let inputs = if j == 0 { vec![] } else { widths(j - 1) };
        for w in widths(j) {
            for &cin in &inputs {
                keys.push(ComponentKey {
                    kind: ComponentKind::Embed,
                    width: w,
                    resolution: side,
                    exp: cin,
                });
            }
            keys.push(ComponentKey {
                kind: ComponentKind::Mb4d,
                width: w,
                resolution: side,
                exp: layout.exp,
            });
            if j >= 2 {
                keys.push(ComponentKey {
                    kind: ComponentKind::Mb3d,
                    width: w,
                    resolution: side,
                    exp: layout.exp,
                });
            }
        }
    }
    for w in widths(NUM_STAGES - 1) {
        keys.push(ComponentKey {
            kind: ComponentKind::Head,
            width: w,
            resolution: r >> (NUM_STAGES + 1),
            exp: layout.classes,
        });
    }
    keys
}

/// Identifies the measuring host: OS, architecture and CPU model.
pub fn host_fingerprint() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".to_string());
    format!("{}-{}-{}", std::env::consts::OS, std::env::consts::ARCH, cpu)
}

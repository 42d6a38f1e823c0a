//! Command-line front end. Exit codes: 0 success, 1 domain failure, 2 usage.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config_text, RunConfig};

use crate::arch::{self, count_buffers, count_macs, count_params, ArchSpec, BlockSpec, ComponentKind, Model};
use crate::latency::{self, AttnShape, BenchConfig, Grid, LatencyTable, SyntheticCost};
use crate::slimming::{slim, SlimConfig, SupernetOracle};
use crate::supernet::{search_layout, NoiseKind, Selection, SuperNet};
use crate::training::{self, Dataset, DatasetSpec, GeneratorKind, GumbelSchedule, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}

domain_from!(
    arch::ArchError,
    latency::LatencyError,
    crate::slimming::SlimError,
    crate::supernet::SupernetError,
    training::TrainError,
    crate::tensor::checkpoint::CheckpointError,
    std::io::Error,
    serde_json::Error
);

#[derive(Debug, Parser)]
#[command(name = "efficientformer", version, about = "Dimension-consistent ViT search at desk scale")]
pub struct Cli {
    /// Settings file: a JSON object or `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a setting; repeatable. Beats the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect architecture specs and presets.
    #[command(subcommand)]
    Arch(ArchCmd),
    /// Build or inspect latency lookup tables.
    #[command(subcommand)]
    Lut(LutCmd),
    /// Supernet training and latency-driven slimming.
    #[command(subcommand)]
    Search(SearchCmd),
    /// Train an architecture from scratch.
    Train(TrainArgs),
    /// Top-1 accuracy of a model on a dataset split.
    Eval(EvalArgs),
    /// Synthetic datasets.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Architecture JSON file.
    #[arg(required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// L1, L3, L7 or toy.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// Override the input resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum ArchCmd {
    Show(SpecArgs),
    Validate(SpecArgs),
    Count {
        #[command(flatten)]
        spec: SpecArgs,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LutCmd {
    Build(LutBuildArgs),
    Show {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct LutBuildArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Deterministic cost model instead of host timing.
    #[arg(long)]
    pub synthetic: bool,
    /// Every key reachable while slimming this search skeleton.
    #[arg(long, conflicts_with_all = ["kinds", "widths", "resolutions"])]
    pub skeleton: Option<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Vec<ComponentKind>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Vec<usize>,
    /// Expansion ratio (blocks) or auxiliary size (other kinds).
    #[arg(long)]
    pub exp: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_qk: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
}

fn parse_kind(s: &str) -> Result<ComponentKind, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
pub enum SearchCmd {
    TrainSupernet(SupernetArgs),
    Slim(SlimArgs),
}

#[derive(Debug, Args)]
pub struct SupernetArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Search skeleton (toy, L1, L3, L7).
    #[arg(long, default_value = "toy")]
    pub skeleton: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("cost").required(true).args(["lut", "synthetic"])))]
#[command(group(clap::ArgGroup::new("target").required(true).args(["target_ms", "target_frac"])))]
pub struct SlimArgs {
    /// Trained supernet checkpoint.
    #[arg(long)]
    pub supernet: PathBuf,
    /// Dataset whose validation split scores accuracy drops.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub target_ms: Option<f64>,
    /// Target as a fraction of the initial estimate.
    #[arg(long)]
    pub target_frac: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model checkpoint; without it a fresh model is built from the spec.
    #[arg(long, conflicts_with_all = ["spec", "preset"])]
    pub model: Option<PathBuf>,
    #[arg(long = "arch")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    Gen(DataGenArgs),
}

#[derive(Debug, Args)]
pub struct DataGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// quadrant-pattern or gaussian-blob.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub noise: Option<f32>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Arch(c) => cmd_arch(c),
        Command::Lut(LutCmd::Build(a)) => {
            let mut rc = RunConfig::new("lut build", file, &cli.set)?;
            cmd_lut_build(a, &mut rc, cli.seed)
        }
        Command::Lut(LutCmd::Show { path }) => cmd_lut_show(&path),
        Command::Search(SearchCmd::TrainSupernet(a)) => {
            let mut rc = RunConfig::new("search train-supernet", file, &cli.set)?;
            cmd_train_supernet(a, &mut rc, cli.seed)
        }
        Command::Search(SearchCmd::Slim(a)) => {
            let mut rc = RunConfig::new("search slim", file, &cli.set)?;
            cmd_slim(a, &mut rc, cli.seed)
        }
        Command::Train(a) => {
            let mut rc = RunConfig::new("train", file, &cli.set)?;
            cmd_train(a, &mut rc, cli.seed)
        }
        Command::Eval(a) => {
            let mut rc = RunConfig::new("eval", file, &cli.set)?;
            cmd_eval(a, &mut rc, cli.seed)
        }
        Command::Data(DataCmd::Gen(a)) => {
            let mut rc = RunConfig::new("data gen", file, &cli.set)?;
            cmd_data_gen(a, &mut rc, cli.seed)
        }
    }
}

fn at<T, E: std::fmt::Display>(p: &Path, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))
}

fn load_spec(a: &SpecArgs) -> Result<ArchSpec, CliError> {
    let mut spec = match (&a.spec, &a.preset) {
        (Some(p), _) => at(p, ArchSpec::load(p))?,
        (None, Some(name)) => arch::preset(name)?,
        (None, None) => return Err(CliError::Usage("give a spec path or --preset".into())),
    };
    if let Some(r) = a.resolution {
        spec.resolution = r;
    }
    Ok(spec)
}

fn mega(n: f64) -> String {
    if n >= 1e9 {
        format!("{:.2}G", n / 1e9)
    } else {
        format!("{:.2}M", n / 1e6)
    }
}

/// One line per stage, e.g. `stage 4: width 768, 7x7, MB3D ×8`.
pub fn describe(spec: &ArchSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name: {}", spec.name.as_deref().unwrap_or("-"));
    let _ = writeln!(s, "resolution: {}", spec.resolution);
    let [a, b] = spec.stem;
    let _ = writeln!(s, "stem: 3 -> {a} -> {b}");
    for (j, st) in spec.stages.iter().enumerate() {
        let side = spec.stage_side(j);
        let mut counts = Vec::new();
        let n4 = st.count_4d();
        let n3 = st.count_3d();
        let nid = st.blocks.iter().filter(|b| matches!(b, BlockSpec::Identity)).count();
        if n4 > 0 {
            counts.push(format!("MB4D ×{n4}"));
        }
        if n3 > 0 {
            counts.push(format!("MB3D ×{n3}"));
        }
        if nid > 0 {
            counts.push(format!("identity ×{nid}"));
        }
        if counts.is_empty() {
            counts.push("empty".into());
        }
        let _ = writeln!(s, "stage {}: width {}, {side}x{side}, {}", j + 1, st.width, counts.join(" "));
    }
    let last = spec.stages.last().map(|s| s.width).unwrap_or(0);
    let _ = writeln!(s, "head: {last} -> {}", spec.head.classes);
    s
}

fn count_report(spec: &ArchSpec) -> Result<(serde_json::Value, String), CliError> {
    let params = count_params(spec)?;
    let buffers = count_buffers(spec)?;
    let macs = count_macs(spec)?;
    let stages = spec.stage_breakdown();
    let json = serde_json::json!({
        "name": spec.name,
        "resolution": spec.resolution,
        "params": params,
        "buffers": buffers,
        "macs": macs,
        "stages": stages.iter().map(|(p, m)| serde_json::json!({"params": p, "macs": m})).collect::<Vec<_>>(),
    });
    let mut text = String::new();
    let _ = writeln!(text, "params: {params} ({})", mega(params as f64));
    let _ = writeln!(text, "buffers: {buffers}");
    let _ = writeln!(text, "MACs: {macs} ({})", mega(macs as f64));
    for (j, (p, m)) in stages.iter().enumerate() {
        let _ = writeln!(text, "stage {}: params {}, MACs {}", j + 1, mega(*p as f64), mega(*m as f64));
    }
    Ok((json, text))
}

fn cmd_arch(c: ArchCmd) -> Result<(), CliError> {
    match c {
        ArchCmd::Show(a) => {
            let spec = load_spec(&a)?;
            print!("{}", describe(&spec));
            spec.ensure_valid()?;
        }
        ArchCmd::Validate(a) => {
            let spec = load_spec(&a)?;
            spec.ensure_valid()?;
            println!("valid");
        }
        ArchCmd::Count { spec, out } => {
            let spec = load_spec(&spec)?;
            let (json, text) = count_report(&spec)?;
            println!("{json}");
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&json)? + "\n")?;
            }
        }
    }
    Ok(())
}

fn cmd_lut_build(a: LutBuildArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let seed = rc.seed(seed)?;
    let warmup = rc.get("warmup_iters", None, 5usize)?;
    let iters = rc.get("measure_iters", None, 30usize)?;
    let repeats = rc.get("repeat_sets", None, 1usize)?;
    let (keys, attn) = match &a.skeleton {
        Some(name) => {
            let l = search_layout(name)?;
            rc.settings.insert("skeleton".into(), name.clone());
            (latency::reachable_keys(&l), AttnShape::of_layout(&l))
        }
        None => {
            if a.kinds.is_empty() || a.widths.is_empty() || a.resolutions.is_empty() {
                return Err(CliError::Usage(
                    "lut build needs --skeleton or all of --kinds, --widths, --resolutions".into(),
                ));
            }
            let attn = AttnShape {
                heads: a.heads.unwrap_or(8),
                d_qk: a.d_qk.unwrap_or(32),
                d_v: a.d_v.unwrap_or(128),
            };
            let grid = Grid {
                kinds: a.kinds.clone(),
                widths: a.widths.clone(),
                resolutions: a.resolutions.clone(),
                exp: a.exp.unwrap_or(4),
            };
            rc.settings.insert("grid".into(), format!("{grid:?}"));
            (grid.keys()?, attn)
        }
    };
    rc.settings.insert("attn".into(), format!("{attn:?}"));
    rc.settings.insert("synthetic".into(), a.synthetic.to_string());
    rc.finish()?;
    rc.path("out", &a.out);
    let (table, errors) = if a.synthetic {
        (SyntheticCost::new(attn).table(keys), Vec::new())
    } else {
        let cfg = BenchConfig {
            warmup_iters: warmup,
            measure_iters: iters,
            repeat_sets: repeats,
            attn,
            seed,
        };
        latency::build_table_for_keys(&keys, &cfg)?
    };
    for e in &errors {
        eprintln!("warning: {e}");
    }
    table.save_csv(&a.out)?;
    rc.write_beside(&a.out)?;
    println!("{}", serde_json::json!({"entries": table.len(), "failed": errors.len(), "out": a.out}));
    Ok(())
}

fn cmd_lut_show(path: &Path) -> Result<(), CliError> {
    let loaded = at(path, LatencyTable::load_csv(path))?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let t = &loaded.table;
    println!("{}", serde_json::json!({"entries": t.len(), "fingerprint": t.fingerprint}));
    for (k, e) in &t.entries {
        println!(
            "{:<5} w={:<4} res={:<4} exp={:<4} median {:.6}ms mad {:.6}ms n={}",
            k.kind.as_str(),
            k.width,
            k.resolution,
            k.exp,
            e.median_s * 1e3,
            e.mad_s * 1e3,
            e.samples
        );
    }
    Ok(())
}

fn parse_noise(s: &str) -> Result<NoiseKind, CliError> {
    match s {
        "uniform" => Ok(NoiseKind::UniformAsWritten),
        "gumbel" => Ok(NoiseKind::StandardGumbel),
        "none" => Ok(NoiseKind::None),
        _ => Err(CliError::Usage(format!("noise must be uniform, gumbel or none, got {s:?}"))),
    }
}

fn train_config(
    rc: &mut RunConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    default_epochs: usize,
) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let seed = rc.seed(seed)?;
    let epochs = rc.get("epochs", epochs, default_epochs)?;
    let batch_size = rc.get("batch_size", batch, d.batch_size)?;
    // "auto" scales 1e-3 by batch_size / 1024.
    let lr_raw = rc.get("lr", lr.map(|v| v.to_string()), "auto".to_string())?;
    let base_lr = match lr_raw.as_str() {
        "auto" => None,
        s => Some(s.parse().map_err(|_| CliError::Usage(format!("lr: cannot parse {s:?}")))?),
    };
    let mut optim = d.optim;
    optim.weight_decay = rc.get("weight_decay", None, optim.weight_decay)?;
    Ok(TrainConfig {
        epochs,
        batch_size,
        base_lr,
        min_lr: rc.get("min_lr", None, d.min_lr)?,
        warmup_epochs: rc.get("warmup_epochs", None, d.warmup_epochs)?,
        optim,
        seed,
    })
}

fn metrics_json(m: &training::Metrics) -> serde_json::Value {
    let last = m.rows.last();
    serde_json::json!({
        "initial_loss": m.initial_loss,
        "final_loss": last.map(|r| r.loss),
        "final_top1": last.map(|r| r.top1),
        "final_val_top1": last.and_then(|r| r.val_top1),
    })
}

fn cmd_train_supernet(a: SupernetArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = train_config(rc, seed, a.epochs, a.batch_size, a.lr, 10)?;
    let d = GumbelSchedule::default();
    let noise = rc.get("noise", None, "uniform".to_string())?;
    let gumbel = GumbelSchedule {
        tau_start: rc.get("tau_start", None, d.tau_start)?,
        tau_end: rc.get("tau_end", None, d.tau_end)?,
        noise: parse_noise(&noise)?,
    };
    rc.settings.insert("skeleton".into(), a.skeleton.clone());
    rc.finish()?;
    rc.path("data", &a.data);
    rc.path("out", &a.out);
    let data = at(&a.data, Dataset::load(&a.data))?;
    let mut layout = search_layout(&a.skeleton)?;
    layout.classes = data.spec.classes;
    layout.resolution = data.spec.resolution;
    let mut sn = SuperNet::new(&layout, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    rc.write_into(&a.out)?;
    let metrics = training::train_supernet(&mut sn, &data, &cfg, &gumbel, Some(&a.out))?;
    metrics.save_csv(a.out.join("metrics.csv"))?;
    let ckpt = a.out.join("supernet.ckpt");
    sn.save(&ckpt)?;
    let imp = sn.importance_scores();
    let summary = serde_json::json!({
        "checkpoint": ckpt,
        "metrics": metrics_json(&metrics),
        "importance": imp.per_path,
        "stage_importance": imp.per_stage,
    });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    Ok(())
}

fn cmd_slim(a: SlimArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    rc.seed(seed)?;
    let eval_batch = rc.get("eval_batch", None, 64usize)?;
    let max_iters = rc.get("max_iters", None, SlimConfig::new(1.0).max_iters)?;
    let tau = rc.get("eval_tau", None, 0.1f32)?;
    rc.settings.insert("synthetic".into(), a.synthetic.to_string());
    rc.finish()?;
    rc.path("supernet", &a.supernet);
    rc.path("data", &a.data);
    rc.path("out", &a.out);
    if let Some(p) = &a.lut {
        rc.path("lut", p);
    }
    let sn = at(&a.supernet, SuperNet::load(&a.supernet))?;
    let data = at(&a.data, Dataset::load(&a.data))?;
    let layout = sn.layout.clone();
    let table = match &a.lut {
        Some(p) => {
            let loaded = at(p, LatencyTable::load_csv(p))?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            loaded.table
        }
        None => SyntheticCost::new(AttnShape::of_layout(&layout)).table(latency::reachable_keys(&layout)),
    };
    let initial = Selection::from_layout(&layout);
    let est0 = latency::estimate_latency(&sn.derive_arch(&initial)?, &table)?;
    let target_s = match (a.target_ms, a.target_frac) {
        (Some(ms), _) => ms * 1e-3,
        (None, Some(f)) => f * est0,
        (None, None) => unreachable!("clap enforces a target"),
    };
    if !(target_s > 0.0) {
        return Err(CliError::Usage(format!("target must be positive, got {target_s}s")));
    }
    rc.settings.insert("target_s".into(), format!("{target_s:e}"));
    std::fs::create_dir_all(&a.out)?;
    rc.write_into(&a.out)?;
    let eval = data.val.batches(eval_batch);
    let mut oracle = SupernetOracle::new(&sn, initial.clone(), &eval);
    oracle.tau = tau;
    let cfg = SlimConfig {
        target_latency_s: target_s,
        max_iters,
    };
    let r = slim(&layout, &initial, &table, &cfg, &mut oracle)?;
    let arch_path = a.out.join("arch.json");
    let trace_path = a.out.join("trace.jsonl");
    r.spec.save(&arch_path)?;
    std::fs::write(&trace_path, r.trace.to_jsonl())?;
    std::fs::write(a.out.join("trace.txt"), r.trace.to_table())?;
    let summary = serde_json::json!({
        "arch": arch_path,
        "trace": trace_path,
        "steps": r.trace.steps.len(),
        "initial_latency_s": r.initial_latency_s,
        "final_latency_s": r.final_latency_s,
        "target_latency_s": target_s,
        "reached": r.reached,
        "diagnostics": r.diagnostics,
        "params": count_params(&r.spec)?,
        "macs": count_macs(&r.spec)?,
    });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    print!("{}", r.trace.to_table());
    println!("arch: {}", arch_path.display());
    println!("trace: {}", trace_path.display());
    if !r.reached {
        return Err(CliError::Domain(format!(
            "target {:.4}ms not reached; best estimate {:.4}ms ({})",
            target_s * 1e3,
            r.final_latency_s * 1e3,
            r.diagnostics.join("; ")
        )));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = train_config(rc, seed, a.epochs, a.batch_size, a.lr, TrainConfig::default().epochs)?;
    rc.finish()?;
    rc.path("data", &a.data);
    rc.path("out", &a.out);
    if let Some(p) = &a.spec.spec {
        rc.path("arch", p);
    }
    let spec = load_spec(&a.spec)?;
    spec.ensure_valid()?;
    let data = at(&a.data, Dataset::load(&a.data))?;
    std::fs::create_dir_all(&a.out)?;
    rc.write_into(&a.out)?;
    spec.save(a.out.join("arch.json"))?;
    let mut model = Model::instantiate(&spec, cfg.seed)?;
    let metrics = training::train_model(&mut model, &data, &cfg, Some(&a.out))?;
    metrics.save_csv(a.out.join("metrics.csv"))?;
    let ckpt = a.out.join("model.ckpt");
    model.save(&ckpt)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(training::evaluate(&model, &data.test)?)
    };
    let summary = serde_json::json!({
        "checkpoint": ckpt,
        "metrics": metrics_json(&metrics),
        "test_top1": test,
    });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    Ok(())
}

fn cmd_eval(a: EvalArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let seed = rc.seed(seed)?;
    rc.finish()?;
    let model = match &a.model {
        Some(p) => at(p, Model::load(p))?,
        None => {
            let sa = SpecArgs {
                spec: a.spec.clone(),
                preset: a.preset.clone(),
                resolution: None,
            };
            Model::instantiate(&load_spec(&sa)?, seed)?
        }
    };
    let data = at(&a.data, Dataset::load(&a.data))?;
    let split = data
        .split(&a.split)
        .ok_or_else(|| CliError::Usage(format!("unknown split {:?} (train, val or test)", a.split)))?;
    if model.spec.head.classes != data.spec.classes {
        return Err(training::TrainError::ClassMismatch {
            model: model.spec.head.classes,
            data: data.spec.classes,
        }
        .into());
    }
    let top1 = training::evaluate(&model, split)?;
    println!("{}", serde_json::json!({"split": a.split, "samples": split.len(), "top1": top1}));
    Ok(())
}

fn cmd_data_gen(a: DataGenArgs, rc: &mut RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let seed = rc.seed(seed)?;
    let d = DatasetSpec::toy(4, seed);
    let kind_raw = rc.get("kind", a.kind.clone(), "quadrant-pattern".to_string())?;
    let kind: GeneratorKind = serde_json::from_value(serde_json::Value::String(kind_raw.clone()))
        .map_err(|_| CliError::Usage(format!("unknown dataset kind {kind_raw:?}")))?;
    let spec = DatasetSpec {
        classes: rc.get("classes", a.classes, d.classes)?,
        resolution: rc.get("resolution", a.resolution, d.resolution)?,
        train: rc.get("train", a.train, d.train)?,
        val: rc.get("val", a.val, d.val)?,
        test: rc.get("test", a.test, d.test)?,
        seed,
        kind,
        noise: rc.get("noise", a.noise, d.noise)?,
    };
    rc.finish()?;
    rc.path("out", &a.out);
    let data = training::gen_synthetic(&spec)?;
    data.save(&a.out)?;
    rc.write_beside(&a.out)?;
    println!("{}", serde_json::json!({"out": a.out, "spec": spec}));
    Ok(())
}

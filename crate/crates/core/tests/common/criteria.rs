//! One function per acceptance criterion. Each returns a verdict and a
//! one-line summary of what was measured.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use efficientformer::arch::{count_macs, count_params, preset, ArchSpec, Model};
use efficientformer::latency::{
    build_table_for_keys, estimate_latency, measure_model, reachable_keys, AttnShape, BenchConfig, LatencyTable, SyntheticCost,
};
use efficientformer::nn::{fold_bn_into_conv, BnWeights, ConvWeights};
use efficientformer::slimming::{slim, SlimAction, SlimConfig, SlimResult, StaticOracle, SupernetOracle};
use efficientformer::supernet::{branch_weights_with_noise, derive_arch, search_layout, Selection, SuperNet};
use efficientformer::tensor::{Tape, Tensor};
use efficientformer::training::{evaluate, gen_synthetic, train_final, train_supernet, DatasetSpec, GumbelSchedule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{run_op, OPS};
use super::reference as r;
use super::slimref::{best_first, expand, Move, Problem};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Outcome {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

/// Published parameter counts (millions) and GMACs at 224².
pub const PUBLISHED: [(&str, f64, f64); 3] = [("l1", 12.3, 1.3), ("l3", 31.3, 3.9), ("l7", 82.1, 10.2)];

pub fn structural() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, p_ref, m_ref) in PUBLISHED {
        let spec = preset(name).unwrap();
        let p = count_params(&spec).unwrap() as f64 / 1e6;
        let m = count_macs(&spec).unwrap() as f64 / 1e9;
        let (ep, em) = ((p - p_ref).abs() / p_ref, (m - m_ref).abs() / m_ref);
        pass &= ep <= 0.10 && em <= 0.10;
        parts.push(format!("{name} {p:.2}M ({:+.1}%) {m:.2}G ({:+.1}%)", 100.0 * (p - p_ref) / p_ref, 100.0 * (m - m_ref) / m_ref));
    }
    let el = t.elapsed();
    pass &= el < Duration::from_secs(1);
    Outcome::new(pass, format!("{}; {}", parts.join(", "), secs(el)))
}

// ---------------------------------------------------------------- 2

pub fn gradients() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for (name, f) in OPS {
        let c = run_op(f);
        if !c.ok() {
            pass = false;
            failed.push(format!("{name} grad {:.2e} fwd {:.2e}", c.grad_rel, c.forward_rel));
        }
        if c.grad_rel > worst.0 {
            worst = (c.grad_rel, name);
        }
    }
    let el = t.elapsed();
    pass &= el < Duration::from_secs(120);
    let mut d = format!("{} ops x 5 seeds, worst rel err {:.2e} ({}); {}", OPS.len(), worst.0, worst.1, secs(el));
    if !failed.is_empty() {
        d += &format!("; failing: {}", failed.join(", "));
    }
    Outcome::new(pass, d)
}

// ---------------------------------------------------------------- 3

/// Max abs difference between conv→BN(eval) and the folded conv, plus the
/// same unfolded path against the f64 reference.
pub fn fold_pair(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ci = rng.random_range(1..6);
    let co = rng.random_range(1..9);
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
    let side = rng.random_range(4..9);
    let xs = [2, ci, side, side];
    let x = Tensor::randn(&xs, 1.0, &mut rng);
    let conv = ConvWeights {
        weight: Tensor::randn(&[co, ci, k, k], 0.5, &mut rng),
        bias: rng.random_bool(0.5).then(|| Tensor::randn(&[co], 0.5, &mut rng)),
        stride,
        padding: pad,
    };
    let bn = BnWeights {
        gamma: Tensor::uniform(&[co], 0.5, 1.5, &mut rng),
        beta: Tensor::randn(&[co], 0.5, &mut rng),
        running_mean: Tensor::randn(&[co], 0.5, &mut rng),
        running_var: Tensor::uniform(&[co], 0.2, 2.0, &mut rng),
        eps: 1e-5,
    };
    let folded = fold_bn_into_conv(&conv, &bn).unwrap();

    let mut t = Tape::no_grad();
    let xv = t.constant(x.clone()).unwrap();
    let w = t.constant(conv.weight.clone()).unwrap();
    let b = conv.bias.clone().map(|b| t.constant(b).unwrap());
    let y = t.conv2d(xv, w, b, stride, pad).unwrap();
    let g = t.constant(bn.gamma.clone()).unwrap();
    let be = t.constant(bn.beta.clone()).unwrap();
    let unfolded = t.batch_norm_eval(y, g, be, bn.running_mean.data(), bn.running_var.data(), bn.eps).unwrap();
    let fw = t.constant(folded.weight.clone()).unwrap();
    let fb = folded.bias.clone().map(|b| t.constant(b).unwrap());
    let fy = t.conv2d(xv, fw, fb, stride, pad).unwrap();
    let (u, f) = (t.value(unfolded).clone(), t.value(fy).clone());
    let fold_err = u.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);

    let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let zeros = vec![0.0; co];
    let bias = conv.bias.as_ref().map(f64s).unwrap_or(zeros);
    let (yr, shape) = r::conv2d(&f64s(&x), xs, &f64s(&conv.weight), [co, ci, k, k], Some(&bias), stride, pad);
    let stats = [f64s(&bn.gamma), f64s(&bn.beta), f64s(&bn.running_mean), f64s(&bn.running_var)];
    let refd = r::batch_norm_eval(&yr, shape[0], co, shape[2] * shape[3], [&stats[0], &stats[1], &stats[2], &stats[3]], 1e-5);
    let ref_err = u.data().iter().zip(&refd).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    (fold_err, ref_err)
}

pub fn bn_folding() -> Outcome {
    let (mut worst, mut worst_ref) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (e, er) = fold_pair(seed);
        worst = worst.max(e);
        worst_ref = worst_ref.max(er);
    }
    Outcome::new(
        worst <= 1e-5 && worst_ref <= 1e-4,
        format!("20 pairs, folded vs unfolded max abs {worst:.2e}; unfolded vs f64 {worst_ref:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

pub struct GumbelStats {
    pub simplex: f64,
    pub cold_mass: f64,
    pub cold_skipped: usize,
    pub shift: f64,
}

/// Worst simplex deviation, minimum argmax mass at τ=1e-4 (draws whose top
/// two noisy logits are within 2e-3 are skipped: their argmax is not
/// resolvable at that temperature), worst shift deviation.
pub fn gumbel_stats(draws: usize, seed: u64) -> GumbelStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GumbelStats {
        simplex: 0.0,
        cold_mass: 1.0,
        cold_skipped: 0,
        shift: 0.0,
    };
    for _ in 0..draws {
        let n = rng.random_range(2..6);
        let alpha: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eps: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let tau: f32 = rng.random_range(0.1..5.0);
        let w = branch_weights_with_noise(&alpha, &eps, tau).unwrap();
        let sum: f64 = w.iter().map(|&v| v as f64).sum();
        s.simplex = s.simplex.max((sum - 1.0).abs());
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let z: Vec<f64> = alpha.iter().zip(&eps).map(|(a, e)| *a as f64 + *e as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        if z[order[0]] - z[order[1]] < 2e-3 {
            s.cold_skipped += 1;
        } else {
            let cold = branch_weights_with_noise(&alpha, &eps, 1e-4).unwrap();
            s.cold_mass = s.cold_mass.min(cold[order[0]] as f64);
        }

        let c: f32 = rng.random_range(-8.0..8.0);
        let shifted: Vec<f32> = alpha.iter().map(|a| a + c).collect();
        let ws = branch_weights_with_noise(&shifted, &eps, tau).unwrap();
        let d = w.iter().zip(&ws).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        s.shift = s.shift.max(d);
    }
    s
}

pub fn gumbel() -> Outcome {
    let s = gumbel_stats(2000, 7);
    Outcome::new(
        s.simplex <= 1e-6 && s.cold_mass >= 1.0 - 1e-6 && s.shift <= 1e-6,
        format!(
            "2000 draws: |sum-1| {:.1e}, min argmax mass at tau 1e-4 {:.9} ({} near-ties skipped), shift dev {:.1e}",
            s.simplex, s.cold_mass, s.cold_skipped, s.shift
        ),
    )
}

// ---------------------------------------------------------------- 5

pub struct SlimCase {
    pub skeleton: &'static str,
    pub importance: Vec<f32>,
    pub frac: f64,
}

/// Hand-set importance vectors plus seeded random ones, at several targets.
pub fn slim_cases() -> Vec<SlimCase> {
    let mut out = Vec::new();
    let toy: Vec<Vec<f32>> = vec![
        vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
        vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        vec![0.5; 8],
        vec![0.3, 0.9, 0.1, 0.7, 0.4, 0.4, 0.8, 0.2],
        vec![0.05, 0.05, 1.0, 1.0, 0.02, 0.6, 0.01, 0.9],
    ];
    let l1: Vec<Vec<f32>> = vec![
        (0..15).map(|i| 1.0 - i as f32 / 20.0).collect(),
        (0..15).map(|i| ((i * 7) % 15) as f32 / 15.0 + 0.01).collect(),
        vec![0.25; 15],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random: Vec<Vec<f32>> = (0..6).map(|_| (0..8).map(|_| rng.random::<f32>()).collect()).collect();
    for frac in [0.9, 0.75, 0.6, 0.4, 0.05] {
        for imp in toy.iter().chain(&random) {
            out.push(SlimCase { skeleton: "toy", importance: imp.clone(), frac });
        }
        for imp in &l1 {
            out.push(SlimCase { skeleton: "l1", importance: imp.clone(), frac });
        }
    }
    out
}

fn as_move(a: &SlimAction) -> Move {
    match *a {
        SlimAction::DepthReduction { path } => ("DR", path),
        SlimAction::Mb3dReduction { path } => ("MR", path),
        SlimAction::WidthReduction { stage } => ("WR", stage),
    }
}

pub fn run_slim_case(c: &SlimCase) -> (SlimResult, f64) {
    let layout = search_layout(c.skeleton).unwrap();
    let table = SyntheticCost::new(AttnShape::of_layout(&layout)).table(reachable_keys(&layout));
    let init = Selection::from_layout(&layout);
    let est0 = estimate_latency(&derive_arch(&layout, &init).unwrap(), &table).unwrap();
    let target = c.frac * est0;
    let mut oracle = StaticOracle {
        layout: layout.clone(),
        per_path: c.importance.clone(),
    };
    (slim(&layout, &init, &table, &SlimConfig::new(target), &mut oracle).unwrap(), target)
}

/// Checks (a)-(c) for one case; returns a failure message.
pub fn check_slim_case(c: &SlimCase) -> Result<(usize, usize), String> {
    let (res, target) = run_slim_case(c);
    let steps = &res.trace.steps;
    let mut prev = res.initial_latency_s;
    for s in steps {
        if s.est_latency_before != prev || !(s.est_latency_after < s.est_latency_before) {
            return Err(format!("step {} does not strictly decrease latency", s.step));
        }
        prev = s.est_latency_after;
    }
    let layout = search_layout(c.skeleton).unwrap();
    let p = Problem::new(&layout, c.importance.clone());
    let floor = p.latency(&p.floor());
    if p.latency(&p.start()) != res.initial_latency_s {
        return Err(format!("initial latency {} vs reference {}", res.initial_latency_s, p.latency(&p.start())));
    }
    if floor <= target && !(res.reached && res.final_latency_s <= target) {
        return Err(format!("reachable target {target} missed: final {}", res.final_latency_s));
    }
    if floor > target && res.reached {
        return Err("reported reaching an unreachable target".into());
    }
    let tree = expand(&p, p.start(), 6);
    let want = best_first(&p, &tree, target);
    let got: Vec<Move> = steps.iter().take(6).map(|s| as_move(&s.action)).collect();
    if want != got {
        return Err(format!("greedy {got:?} vs enumeration {want:?}"));
    }
    Ok((steps.len(), super::slimref::node_count(&tree)))
}

/// Runs every case; the second value is the concatenated trace JSONL.
pub fn slimming() -> (Outcome, String) {
    let t = Instant::now();
    let cases = slim_cases();
    let mut failures = Vec::new();
    let mut nodes = 0;
    let mut traces = String::new();
    for (i, c) in cases.iter().enumerate() {
        match check_slim_case(c) {
            Ok((_, n)) => nodes += n,
            Err(e) => failures.push(format!("case {i} ({} @ {}): {e}", c.skeleton, c.frac)),
        }
        traces += &run_slim_case(c).0.trace.to_jsonl();
    }
    let el = t.elapsed();
    let pass = failures.is_empty() && el < Duration::from_secs(60);
    let mut d = format!("{} cases, {} tree nodes enumerated; {}", cases.len(), nodes, secs(el));
    if !failures.is_empty() {
        d += &format!("; {}", failures.join("; "));
    }
    (Outcome::new(pass, d), traces)
}

// ---------------------------------------------------------------- 6

pub fn bench_config(attn: AttnShape) -> BenchConfig {
    let mut b = BenchConfig::new(attn);
    b.warmup_iters = 10;
    b.measure_iters = 50;
    b.repeat_sets = 3;
    b
}

pub struct Pipeline {
    pub outcome: Outcome,
    pub table: LatencyTable,
    pub slimmed: ArchSpec,
}

pub fn pipeline() -> Pipeline {
    let t = Instant::now();
    let data = gen_synthetic(&DatasetSpec::toy(4, 1)).unwrap();
    let layout = search_layout("toy").unwrap();
    let mut sn = SuperNet::new(&layout, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        base_lr: Some(1e-3),
        ..TrainConfig::default()
    };
    train_supernet(&mut sn, &data, &cfg, &GumbelSchedule::default(), None).unwrap();
    let t_super = t.elapsed();

    let bench = bench_config(AttnShape::of_layout(&layout));
    let (table, errors) = build_table_for_keys(&reachable_keys(&layout), &bench).unwrap();
    assert!(errors.is_empty(), "{errors:?}");
    let init = Selection::from_layout(&layout);
    let max_spec = derive_arch(&layout, &init).unwrap();
    let est0 = estimate_latency(&max_spec, &table).unwrap();
    let val = data.val.batches(64);
    let mut oracle = SupernetOracle::new(&sn, init.clone(), &val);
    let res = slim(&layout, &init, &table, &SlimConfig::new(0.6 * est0), &mut oracle).unwrap();

    let final_cfg = TrainConfig { epochs: 20, ..cfg };
    let (model, _) = train_final(&res.spec, &data, &final_cfg).unwrap();
    let top1 = evaluate(&model, &data.test).unwrap();

    let slim_ms = measure_model(&model, &bench).unwrap().median_s;
    let max_ms = measure_model(&Model::instantiate(&max_spec, 0).unwrap(), &bench).unwrap().median_s;
    let ratio = slim_ms / max_ms;
    let el = t.elapsed();
    let pass = res.reached && top1 >= 0.95 && ratio <= 0.8 && el <= Duration::from_secs(1800);
    let detail = format!(
        "{} slim steps, est {:.3}ms -> {:.3}ms (target {:.3}ms), test top-1 {:.4}, measured {:.3}ms vs maximal {:.3}ms ({:.0}%); supernet {}, total {}",
        res.trace.steps.len(),
        est0 * 1e3,
        res.final_latency_s * 1e3,
        0.6 * est0 * 1e3,
        top1,
        slim_ms * 1e3,
        max_ms * 1e3,
        100.0 * ratio,
        secs(t_super),
        secs(el)
    );
    Pipeline {
        outcome: Outcome::new(pass, detail),
        table,
        slimmed: res.spec,
    }
}

// ---------------------------------------------------------------- 7

/// Removing any single component lowers the estimate by exactly its entry
/// (up to the last bit of the running sum), and the estimate equals the
/// reference key enumeration summed in execution order.
pub fn additivity(spec: &ArchSpec, table: &LatencyTable) -> Result<(), String> {
    let total = estimate_latency(spec, table).map_err(|e| e.to_string())?;
    let comps = spec.components();
    let direct: f64 = comps.iter().map(|c| table.get(&c.key).unwrap().median_s).sum();
    if direct != total {
        return Err(format!("estimate {total} vs component sum {direct}"));
    }
    for (j, st) in spec.stages.iter().enumerate() {
        for i in 0..st.blocks.len() {
            let mut s = spec.clone();
            let removed = s.stages[j].blocks.remove(i);
            if s.validate().is_err() {
                continue;
            }
            let key = comps.iter().find(|c| c.stage == Some(j) && c.block == Some(i)).map(|c| c.key);
            let Some(key) = key else { continue };
            let entry = table.get(&key).unwrap().median_s;
            let diff = total - estimate_latency(&s, table).map_err(|e| e.to_string())?;
            if (diff - entry).abs() > 1e-12 * total {
                return Err(format!("removing {removed:?} changed the estimate by {diff}, entry {entry}"));
            }
        }
    }
    Ok(())
}

pub fn lut(table: &LatencyTable, extra: &[ArchSpec]) -> Outcome {
    let layout = search_layout("toy").unwrap();
    let toy = preset("toy").unwrap();
    let mut pass = true;
    let mut notes = Vec::new();

    // Exact agreement with the independent enumeration on the synthetic table.
    let syn = SyntheticCost::new(AttnShape::of_layout(&layout)).table(reachable_keys(&layout));
    let p = Problem::new(&layout, vec![0.0; 8]);
    for s in [p.start(), p.floor()] {
        let sel = to_selection(&s);
        let est = estimate_latency(&derive_arch(&layout, &sel).unwrap(), &syn).unwrap();
        if est != p.latency(&s) {
            pass = false;
            notes.push(format!("synthetic estimate {est} vs enumeration {}", p.latency(&s)));
        }
    }
    for spec in std::iter::once(&toy).chain(extra) {
        if let Err(e) = additivity(spec, table) {
            pass = false;
            notes.push(e);
        }
    }

    // Host speed drifts over minutes, so each trial rebuilds the table
    // right before timing the networks; the verdict uses the median trial.
    let bench = bench_config(AttnShape::of_layout(&layout));
    let keys = reachable_keys(&layout);
    let mut devs = Vec::new();
    let mut ratios = Vec::new();
    for trial in 0..3 {
        let (fresh, errors) = build_table_for_keys(&keys, &bench).unwrap();
        assert!(errors.is_empty(), "{errors:?}");
        for (name, spec) in std::iter::once(("toy", &toy)).chain(extra.iter().map(|s| ("slimmed", s))) {
            let est = estimate_latency(spec, &fresh).unwrap();
            let meas = measure_model(&Model::instantiate(spec, 0).unwrap(), &bench).unwrap().median_s;
            if name == "toy" {
                devs.push((est - meas).abs() / meas);
            }
            ratios.push(format!("#{trial} {name} {:.3}/{:.3}ms ({:+.0}%)", est * 1e3, meas * 1e3, 100.0 * (est - meas) / meas));
        }
    }
    devs.sort_by(f64::total_cmp);
    pass &= devs[1] <= 0.30;
    ratios.insert(0, format!("median toy deviation {:.0}%", 100.0 * devs[1]));
    let mut d = format!("additivity exact; {}", ratios.join(", "));
    if !notes.is_empty() {
        d += &format!("; {}", notes.join("; "));
    }
    Outcome::new(pass, d)
}

fn to_selection(s: &super::slimref::State) -> Selection {
    use super::slimref::Slot;
    use efficientformer::supernet::Choice;
    Selection {
        choices: s
            .slots
            .iter()
            .map(|x| match x {
                Slot::Gone => Choice::Identity,
                Slot::Conv => Choice::Mb4d,
                Slot::Attn => Choice::Mb3d,
            })
            .collect(),
        widths: s.widths,
    }
}

// ---------------------------------------------------------------- 8

pub fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_efficientformer"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn must(args: &[&str]) {
    let o = cli(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// Trains a two-epoch supernet and slims it twice per run, from two
/// independent runs with the same seed. Returns the trace bytes of each.
pub fn cli_search_traces(dir: &Path) -> Vec<Vec<u8>> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("data.bin");
    must(&["data", "gen", "--out", &s(&data), "--classes", "4", "--train", "64", "--val", "32", "--test", "32", "--seed", "3"]);
    let mut out = Vec::new();
    for run in 0..2 {
        let sn_dir = dir.join(format!("sn{run}"));
        must(&[
            "search", "train-supernet", "--data", &s(&data), "--out", &s(&sn_dir), "--epochs", "2", "--batch-size", "16", "--lr", "0.001",
            "--seed", "9",
        ]);
        for rep in 0..2 {
            let slim_dir = dir.join(format!("slim{run}_{rep}"));
            must(&[
                "search",
                "slim",
                "--supernet",
                &s(&sn_dir.join("supernet.ckpt")),
                "--data",
                &s(&data),
                "--synthetic",
                "--target-frac",
                "0.6",
                "--out",
                &s(&slim_dir),
                "--seed",
                "9",
            ]);
            out.push(std::fs::read(slim_dir.join("trace.jsonl")).unwrap());
        }
    }
    out
}

pub fn determinism(first: &str, dir: &Path) -> Outcome {
    let (_, second) = slimming();
    let lib_same = first.as_bytes() == second.as_bytes();
    let traces = cli_search_traces(dir);
    let cli_same = traces.windows(2).all(|w| w[0] == w[1]) && !traces[0].is_empty();
    Outcome::new(
        lib_same && cli_same,
        format!(
            "library traces {} bytes identical: {lib_same}; 4 CLI traces ({} bytes) identical: {cli_same}",
            first.len(),
            traces[0].len()
        ),
    )
}

//! Runs every acceptance criterion and prints one PASS/FAIL line each.

mod common;

use common::criteria::{self, Outcome};

fn report(n: usize, name: &str, o: &Outcome, failed: &mut Vec<usize>) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {verdict} {name}: {}", o.detail);
    if !o.pass {
        failed.push(n);
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut failed = Vec::new();
    report(1, "structural counts", &criteria::structural(), &mut failed);
    report(2, "gradient suite", &criteria::gradients(), &mut failed);
    report(3, "bn folding", &criteria::bn_folding(), &mut failed);
    report(4, "gumbel properties", &criteria::gumbel(), &mut failed);
    let (slim, traces) = criteria::slimming();
    report(5, "slimming correctness", &slim, &mut failed);
    let pipe = criteria::pipeline();
    report(6, "toy pipeline", &pipe.outcome, &mut failed);
    report(7, "lut estimator", &criteria::lut(&pipe.table, &[pipe.slimmed.clone()]), &mut failed);
    report(8, "determinism", &criteria::determinism(&traces, dir.path()), &mut failed);
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

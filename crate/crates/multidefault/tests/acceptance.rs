//! Acceptance gate: one line per criterion, exit status 1 if any fails.
//!
//! Runs the shipped configurations under `configs/` through the same code
//! paths as the command-line suites.

use std::process::ExitCode;
use std::time::Instant;

use multidefault::config::RunConfig;
use multidefault::runner::{run_price, run_verify, SuiteReport};
use multidefault::Result;

/// `-e^{-1} (e^2 - 1) / 2`.
const COUNTEREXAMPLE: f64 = -1.1752011936438014;

fn load(name: &str) -> RunConfig {
    let path = format!("{}/../../configs/{name}.json", env!("CARGO_MANIFEST_DIR"));
    RunConfig::load(path.as_ref()).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn failed_checks(r: &SuiteReport) -> String {
    let bad: Vec<String> = r.checks.iter().filter(|c| !c.passed).map(|c| format!("{} = {:.4e}", c.name, c.value)).collect();
    if bad.is_empty() {
        String::new()
    } else {
        format!(" [failed: {}]", bad.join("; "))
    }
}

/// Runs `suite` on every config; returns the overall verdict and a summary.
fn suites(suite: &str, names: &[&str]) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in names {
        let t = Instant::now();
        let r = run_verify(suite, &load(name))?;
        ok &= r.passed;
        let verdict = if r.passed { "ok" } else { "FAIL" };
        parts.push(format!("{name} {verdict} {:.1}s{}", t.elapsed().as_secs_f64(), failed_checks(&r)));
    }
    Ok((ok, parts.join(", ")))
}

fn counterexample() -> Result<(bool, String)> {
    let cfg = load("c1_counterexample");
    let t = Instant::now();
    let run = run_price(&cfg)?;
    let secs = t.elapsed().as_secs_f64();
    let rel = (run.record.y0 - COUNTEREXAMPLE).abs() / COUNTEREXAMPLE.abs();
    let cmp = run_verify("comparison", &cfg)?;
    let flagged = cmp.expected_failure && cmp.passed;
    let ok = rel <= 0.01 && secs < 30.0 && run.record.paths == 200_000 && flagged;
    Ok((
        ok,
        format!(
            "Y0 = {:.5} (se {:.5}), relative error {:.3}% <= 1%, {secs:.1}s < 30s, hypotheses flagged as violated: {flagged}",
            run.record.y0,
            run.record.se,
            100.0 * rel
        ),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let cfg = load("c10_determinism");
    let mut records = Vec::new();
    for threads in [1, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        for _ in 0..2 {
            let rec = pool.install(|| run_price(&cfg))?.record;
            records.push((threads, serde_json::to_vec(&rec)?));
        }
    }
    let same = records.iter().all(|(_, r)| *r == records[0].1);
    Ok((same, format!("{} records over 1, 4, 8 threads, byte-identical: {same}", records.len())))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Box<dyn Fn() -> Result<(bool, String)>>);
    let criteria: Vec<Criterion> = vec![
        ("counterexample golden value", Box::new(counterexample)),
        (
            "solver cross-validation",
            Box::new(|| {
                suites(
                    "cross",
                    &["c2_cross_p1", "c2_cross_p2_optional", "c2_cross_p2_predictable", "c2_cross_p3_optional", "c2_cross_p3_predictable"],
                )
            }),
        ),
        ("martingale normalization", Box::new(|| suites("martingale", &["c3_martingale_p1", "c3_martingale_p2", "c3_martingale_p3"]))),
        ("closed form vs Euler refinement", Box::new(|| suites("euler", &["c4_euler_p1", "c4_euler_p2", "c4_euler_p3"]))),
        ("Picard contraction", Box::new(|| suites("contraction", &["c5_contraction_constant", "c5_contraction_tanh"]))),
        ("a priori estimates", Box::new(|| suites("apriori", &["c6_apriori_linear", "c6_apriori_seller", "c6_apriori_zero"]))),
        ("comparison monotonicity", Box::new(|| suites("comparison", &["c7_comparison"]))),
        ("replication", Box::new(|| suites("replication", &["c8_replication"]))),
        ("P/Q identity", Box::new(|| suites("pq", &["c9_pq"]))),
        ("determinism", Box::new(determinism)),
    ];
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        all &= ok;
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name} ({:.1}s): {detail}", i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {}", if all { "all criteria passed" } else { "FAILED" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance run: one `[PASS]` or `[FAIL]` line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,12` runs a subset. `ACCEPTANCE_STRICT=1` makes any
//! failure a non-zero exit; by default the run reports and exits 0 so the
//! verdicts stay visible in the workspace test log.

mod cgm;
mod gp;
mod neural;
mod repro;
mod support;

use std::time::Instant;

use support::Verdict;

type Check = fn(&mut support::Shared) -> Result<Verdict, String>;

const CRITERIA: [(u8, &str, Check); 12] = [
    (1, "GP exactness", gp::exactness),
    (2, "GP oracle equivalence", gp::oracle_equivalence),
    (3, "hyperparameter recovery", gp::hyperparameter_recovery),
    (4, "alpha calibration", cgm::alpha_calibration),
    (5, "residual bias", cgm::residual_bias),
    (6, "interfrequency correlation", cgm::correlation),
    (7, "convergence protocol", cgm::convergence),
    (8, "throughput", cgm::throughput),
    (9, "spatial continuity", cgm::spatial_continuity),
    (10, "density experiment", cgm::density),
    (11, "numerical hygiene", neural::hygiene),
    (12, "reproducibility", repro::reproducibility),
];

fn selected() -> Option<Vec<u8>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v != "0");
    let mut shared = support::Shared::default();
    let (mut passed, mut failed) = (0, 0);
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let verdict = check(&mut shared).unwrap_or_else(|e| Verdict::fail(format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let tag = if verdict.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name} ({secs:.1} s): {}", verdict.detail);
        if verdict.pass {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

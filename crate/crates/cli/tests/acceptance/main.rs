//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- 1 5` runs only criteria 1 and 5.

#[path = "../../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod common;

mod checks;
mod training;

use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "matcher exactness", run: checks::matcher_exactness },
    Criterion { id: 2, name: "gradient fidelity", run: checks::gradient_fidelity },
    Criterion { id: 3, name: "metric oracles", run: checks::metric_oracles },
    Criterion { id: 4, name: "loss identity", run: checks::loss_identity },
    Criterion { id: 5, name: "curriculum correctness", run: checks::curriculum },
    Criterion { id: 6, name: "end-to-end synthetic training", run: training::end_to_end },
    Criterion { id: 7, name: "ablation trend", run: training::ablation_trend },
    Criterion { id: 8, name: "determinism", run: checks::determinism },
    Criterion { id: 9, name: "logits-matrix export", run: training::logits_matrix_variance },
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("criterion {} {:<30} {verdict}  ({secs:.1}s)  {detail}", c.id, c.name);
        println!("{line}");
        lines.push(line);
        if outcome.is_err() {
            failed.push(c.id);
        }
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("  {l}");
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

/// Fails with a timing message when `elapsed` exceeds `limit`.
pub fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

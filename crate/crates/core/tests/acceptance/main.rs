//! Acceptance suite. Every criterion runs at its stated tolerance and prints exactly one
//! `PASS` or `FAIL` line; the process exits non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- <substring>` runs only the matching criteria.

mod metrics;
mod oracle;
mod overfit;
mod selection;
mod spatial;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

// Training frees and reallocates multi-megabyte tensors every step; the system
// allocator hands them back to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub type Outcome = Result<String, String>;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Fails the criterion with a message unless `cond` holds.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const CRITERIA: &[(&str, fn() -> Outcome)] = &[
    ("gradient-suite", gradients::gradient_suite),
    ("attention-normalization", oracle::attention_normalization),
    ("dual-implementation-oracle", oracle::dual_implementation),
    ("knn-fps-oracles", spatial::knn_fps_oracles),
    ("projection-round-trip", spatial::projection_round_trip),
    ("ranking-oracle", selection::ranking_oracle),
    ("double-check-protocol", selection::double_check_protocol),
    ("loss-identities", metrics::loss_identities),
    ("metric-checks", metrics::metric_checks),
    ("end-to-end-overfit", overfit::end_to_end_overfit),
    ("efficiency-telemetry", selection::efficiency_telemetry),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    // Criteria report through their return value; keep panics to one line.
    std::panic::set_hook(Box::new(|info| eprintln!("panic: {info}")));
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

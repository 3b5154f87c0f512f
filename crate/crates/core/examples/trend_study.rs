//! Optimizer comparison on the character-level language model.
//!
//! Usage: trend_study [corpus_bytes] [base_batch] [reference_iters] [out_dir]
//!
//! The defaults match the acceptance run. Larger corpora take
//! proportionally longer per grid candidate.

use std::path::PathBuf;
use std::time::Instant;

use optlab::harness::RunCache;
use optlab::results::{write_results, WriteOptions};
use optlab::trends::{run_trend_study, TrendStudy};

fn main() -> optlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let bytes = args.next().map_or(3073, |s| s.parse().expect("corpus bytes"));
    let base = args.next().map_or(1, |s| s.parse().expect("base batch"));
    let reference = args.next().map_or(48, |s| s.parse().expect("reference iterations"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/trend_study".into()));
    std::fs::create_dir_all(&out)?;

    let study = TrendStudy::char_lm(bytes, base, reference);
    let cache = RunCache::from_env()?;
    let start = Instant::now();
    let report = run_trend_study(&study, &cache)?;
    for (k, v) in &report.table.dropout {
        println!("{k:<16} {v:.4}  (step {:e})", report.table.selected_steps.get(k).copied().unwrap_or(f64::NAN));
    }
    for (k, v) in &report.table.no_dropout {
        println!("{k:<16} {v:.4}  no dropout");
    }
    for c in &report.checks {
        println!("{c}");
    }
    write_results(&report.records, &out.join("results.csv"), WriteOptions::default())?;
    println!("{} runs trained in {:.0} s", report.trained_runs, start.elapsed().as_secs_f64());
    Ok(())
}

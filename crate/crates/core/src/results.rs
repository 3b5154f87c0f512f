//! Run records as CSV: one row per logged iteration.
//!
//! Epoch-end rows also carry the full-dataset training loss in the
//! `eval_metric_*` columns. Floats use the shortest representation that
//! parses back to the same value.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunRecord;

pub const HEADER: [&str; 14] = [
    "run_id",
    "problem",
    "optimizer",
    "momentum_flag",
    "step_size",
    "batch_label",
    "batch_size",
    "seed",
    "epoch",
    "iteration",
    "train_loss",
    "eval_metric_name",
    "eval_metric_value",
    "wall_ms",
];

pub const EVAL_METRIC: &str = "full_train_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub problem: String,
    pub optimizer: String,
    pub momentum_flag: String,
    pub step_size: f64,
    pub batch_label: String,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub iteration: u64,
    pub train_loss: f64,
    pub eval_metric_name: String,
    pub eval_metric_value: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteMode {
    Overwrite,
    /// Keeps existing rows and adds rows whose `(run_id, iteration)` is new.
    Append,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteOptions {
    pub mode: WriteMode,
    /// When false, `wall_ms` is written as 0 so files are reproducible.
    pub timing: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self { mode: WriteMode::Overwrite, timing: true }
    }
}

pub fn rows_for(record: &RunRecord, timing: bool) -> Vec<CsvRow> {
    let c = &record.config;
    record
        .iterations
        .iter()
        .map(|it| {
            let eval = record.evals.iter().find(|e| e.iteration == it.iteration);
            CsvRow {
                run_id: record.run_id.clone(),
                problem: c.problem.id().to_string(),
                optimizer: c.optimizer.id.as_str().to_string(),
                momentum_flag: c.optimizer.id.momentum_flag().to_string(),
                step_size: c.step_size,
                batch_label: c.batch_label.to_string(),
                batch_size: c.batch_size,
                seed: c.seed,
                epoch: it.epoch,
                iteration: it.iteration,
                train_loss: it.train_loss,
                eval_metric_name: if eval.is_some() { EVAL_METRIC.to_string() } else { String::new() },
                eval_metric_value: eval.map(|e| e.train_loss),
                wall_ms: if timing { it.wall_ms } else { 0 },
            }
        })
        .collect()
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_results(records: &[RunRecord], path: &Path, options: WriteOptions) -> Result<()> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut rows: Vec<CsvRow> = records.iter().flat_map(|r| rows_for(r, options.timing)).collect();
    let append = options.mode == WriteMode::Append && path.exists();
    if append {
        let existing: HashSet<(String, u64)> = read_rows(path)?.into_iter().map(|r| (r.run_id, r.iteration)).collect();
        let mut seen = existing;
        rows.retain(|r| seen.insert((r.run_id.clone(), r.iteration)));
        if rows.is_empty() {
            return Ok(());
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        let mut w = writer(file);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        return Ok(());
    }
    let mut seen = HashSet::new();
    rows.retain(|r| seen.insert((r.run_id.clone(), r.iteration)));
    let mut w = writer(std::fs::File::create(path)?);
    w.write_record(HEADER)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::ReaderBuilder::new().from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::schema(path.display().to_string(), format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_training, BatchLabel, ProblemSpec, RunConfig};
    use crate::models::{ModelSpec, QuadraticSpec};
    use crate::optim::{OptimizerConfig, OptimizerId};

    fn record(seed: u64, iters: usize) -> RunRecord {
        run_training(&RunConfig {
            problem: ProblemSpec::Quadratic { n: 8, dim: 2, spread: 1.0, data_seed: 0 },
            model: ModelSpec::Quadratic(QuadraticSpec { curvatures: vec![1.0, 3.0], init_scale: 1.0 }),
            optimizer: OptimizerConfig::new(OptimizerId::AdamMomentum),
            step_size: 1e-2,
            batch_label: BatchLabel::Full,
            batch_size: 8,
            epochs: iters,
            max_iterations: None,
            seed,
            dropout_enabled: false,
            micro_batch: 8,
            eval_every_epochs: 1,
        })
        .unwrap()
    }

    #[test]
    fn line_counts_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = [record(1, 3), record(2, 3)];
        write_results(&recs, &path, WriteOptions { timing: false, ..Default::default() }).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 7);
        assert!(!first.contains(&b'\r'));
        write_results(&recs, &path, WriteOptions { timing: false, ..Default::default() }).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        write_results(&recs[..1], &path, WriteOptions { mode: WriteMode::Append, timing: false }).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert!(matches!(write_results(&[], &path, WriteOptions::default()), Err(Error::NoRecords)));
    }

    #[test]
    fn header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rec = record(5, 4);
        write_results(std::slice::from_ref(&rec), &path, WriteOptions::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows, rows_for(&rec, true));
    }
}

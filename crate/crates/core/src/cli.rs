//! Command-line front end: `train`, `sweep`, `grid`, `noise` and `plot`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 every cell diverged,
//! 4 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{read_config, ConfigDoc, GridConfig, NoiseConfig};
use crate::error::{Error, Result};
use crate::harness::{self, RunCache, RunConfig, SweepResult, SweepSpec};
use crate::noise;
use crate::plot::{self, PlotSpec};
use crate::results::{write_results, WriteMode, WriteOptions};
use crate::rng::{RngStream, StreamId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "optlab", version, about = "Optimizer comparison lab: train, tune, sweep, analyse gradient noise, plot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run configuration.
    Train(CommonArgs),
    /// Grid-search and train every optimizer at every batch size.
    Sweep(CommonArgs),
    /// Step-size grid search for one configuration.
    Grid(CommonArgs),
    /// Gradient error distribution at initialization.
    Noise(CommonArgs),
    /// Render an SVG figure from a results CSV.
    Plot(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Replaces the configured seed; seed lists become N, N+1, ...
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Append to an existing results CSV instead of replacing it.
    #[arg(long)]
    pub append: bool,
    /// Write 0 in the wall_ms column so output files are reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

impl CommonArgs {
    fn write_options(&self) -> WriteOptions {
        WriteOptions {
            mode: if self.append { WriteMode::Append } else { WriteMode::Overwrite },
            timing: !self.no_timing,
        }
    }

    fn seeds(&self, configured: &[u64]) -> Vec<u64> {
        match self.seed {
            Some(s) => (0..configured.len() as u64).map(|i| s + i).collect(),
            None => configured.to_vec(),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Json(_) => EXIT_IO,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        Error::AllDiverged => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: &Command) -> Result<i32> {
    let (args, kind) = match command {
        Command::Train(a) => (a, "run"),
        Command::Sweep(a) => (a, "sweep"),
        Command::Grid(a) => (a, "grid"),
        Command::Noise(a) => (a, "noise"),
        Command::Plot(a) => (a, "plot"),
    };
    let doc = read_config(&args.config).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", args.config.display()))),
        other => other,
    })?;
    std::fs::create_dir_all(&args.out)?;
    match (kind, doc) {
        ("run", ConfigDoc::Run(c)) => train(c, args),
        ("grid", ConfigDoc::Grid(g)) => grid(g, args),
        ("grid", ConfigDoc::Run(c)) => grid(GridConfig { base: c, seeds: crate::config::DEFAULT_SEEDS.to_vec() }, args),
        ("sweep", ConfigDoc::Sweep(s)) => sweep(s, args),
        ("noise", ConfigDoc::Noise(n)) => noise_cmd(n, args),
        ("plot", ConfigDoc::Plot(p)) => plot_cmd(p, args),
        (want, doc) => Err(Error::schema("kind", format!("expected a {want:?} config, found {:?}", doc.kind()))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn train(mut config: RunConfig, args: &CommonArgs) -> Result<i32> {
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let cache = RunCache::from_env()?;
    let problem = config.problem.prepare()?;
    let record = cache.run(&config, &problem)?;
    write_results(std::slice::from_ref(&record), &args.out.join("results.csv"), args.write_options())?;
    write_json(&args.out.join(format!("record_{}.json", record.run_id)), &record)?;
    if record.diverged {
        println!("run {} diverged after {} iterations", record.run_id, record.iterations.len());
    } else {
        println!(
            "run {}: final training loss {} after {} iterations",
            record.run_id,
            record.final_train_loss,
            record.iterations.len()
        );
    }
    Ok(EXIT_OK)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))
}

fn grid(g: GridConfig, args: &CommonArgs) -> Result<i32> {
    let seeds = args.seeds(&g.seeds);
    let cache = RunCache::from_env()?;
    let problem = g.base.problem.prepare()?;
    let result = pool(args.threads)?.install(|| harness::grid_search(&g.base, &seeds, &problem, &cache));
    let result = match result {
        Ok(r) => r,
        Err(Error::AllDiverged) => {
            eprintln!("every step size diverged");
            return Ok(EXIT_DIVERGED);
        }
        Err(e) => return Err(e),
    };
    let mut records = Vec::new();
    for c in &result.candidates {
        for &seed in &seeds {
            records.push(cache.run(&RunConfig { step_size: c.step_size, seed, ..g.base.clone() }, &problem)?);
        }
    }
    write_results(&records, &args.out.join("results.csv"), args.write_options())?;
    write_json(&args.out.join("grid.json"), &result)?;
    for c in &result.candidates {
        println!("step {:<12e} max over seeds {}", c.step_size, c.max_over_seeds);
    }
    println!("selected step size {:e}", result.selected);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct CellSummary<'a> {
    optimizer: &'a str,
    batch_label: String,
    batch_size: usize,
    selected_step: Option<f64>,
    median_final_loss: Option<f64>,
    grid: Option<&'a harness::GridResult>,
    error: Option<&'a str>,
}

pub fn sweep_summary(result: &SweepResult) -> serde_json::Value {
    let cells: Vec<CellSummary> = result
        .cells
        .values()
        .map(|c| CellSummary {
            optimizer: c.optimizer.as_str(),
            batch_label: c.label.to_string(),
            batch_size: result.ladder.iter().find(|(l, _)| *l == c.label).map_or(0, |x| x.1),
            selected_step: c.grid.as_ref().ok().map(|g| g.selected),
            median_final_loss: c.median_final_loss().filter(|v| v.is_finite()),
            grid: c.grid.as_ref().ok(),
            error: c.grid.as_ref().err().map(String::as_str),
        })
        .collect();
    serde_json::json!({
        "ladder": result.ladder.iter().map(|(l, b)| serde_json::json!({"label": l, "batch_size": b})).collect::<Vec<_>>(),
        "budgets": result.budgets,
        "cells": cells,
    })
}

fn sweep(mut spec: SweepSpec, args: &CommonArgs) -> Result<i32> {
    spec.seeds = args.seeds(&spec.seeds);
    let cache = RunCache::from_env()?;
    let result = harness::sweep(&spec, args.threads, &cache)?;
    let records: Vec<_> = result.records().into_iter().cloned().collect();
    write_json(&args.out.join("sweep.json"), &sweep_summary(&result))?;
    for c in result.cells.values() {
        match (&c.grid, c.median_final_loss()) {
            (Ok(g), Some(m)) => println!("{:<10} {:<4} step {:<12e} median final loss {m}", c.optimizer, c.label, g.selected),
            (Err(e), _) => println!("{:<10} {:<4} {e}", c.optimizer, c.label),
            _ => {}
        }
    }
    if records.is_empty() || result.all_diverged() {
        eprintln!("every cell diverged");
        return Ok(EXIT_DIVERGED);
    }
    write_results(&records, &args.out.join("results.csv"), args.write_options())?;
    Ok(EXIT_OK)
}

fn noise_cmd(mut c: NoiseConfig, args: &CommonArgs) -> Result<i32> {
    if let Some(s) = args.seed {
        c.seed = s;
    }
    let problem = c.problem.prepare()?;
    let model = c.model.without_dropout();
    let params = Arc::new(model.init(&mut RngStream::new(c.seed, StreamId::Init))?);
    let pool = pool(args.threads)?;
    for &b in &c.batch_sizes {
        let sample = pool.install(|| {
            noise::grad_error_samples(&model, params.clone(), &problem.train, b, c.n_draws, c.micro_batch, c.seed)
        })?;
        sample.write_csv(&args.out.join(format!("noise_b{b}.csv")))?;
        sample.write_sidecar(&args.out.join(format!("noise_b{b}.json")))?;
        let s = sample.stats();
        println!(
            "batch {b}: mean {:.4} sd {:.4} excess kurtosis {:.3?} tail ratio {:.3?}",
            s.fitted_mu, s.fitted_sigma, s.excess_kurtosis, s.tail_ratio_99_90
        );
    }
    Ok(EXIT_OK)
}

fn plot_cmd(spec: PlotSpec, args: &CommonArgs) -> Result<i32> {
    let path = plot::emit_plot(&spec, &args.out)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

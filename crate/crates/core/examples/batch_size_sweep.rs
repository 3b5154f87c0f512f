//! A small batch-size sweep: every optimizer family is grid-tuned at each
//! rung of the ladder, then the results are written as CSV and figures.
//!
//!     cargo run --release --example batch_size_sweep -- [out_dir] [threads]

use optlab::harness::{sweep, BatchLabel, ProblemSpec, RunCache, SweepSpec};
use optlab::models::{Activation, MlpSpec, ModelSpec};
use optlab::optim::{OptimizerConfig, OptimizerId};
use optlab::plot::{emit_plot, PlotKind, PlotSpec, Scale};
use optlab::results::{write_results, WriteOptions};

fn main() -> optlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "out/sweep".into()));
    let threads: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    std::fs::create_dir_all(&out)?;

    let spec = SweepSpec {
        problem: ProblemSpec::Blobs { n: 1024, dim: 8, classes: 4, separation: 2.0, data_seed: 0, holdout_fraction: 0.0 },
        model: ModelSpec::Mlp(MlpSpec { input_dim: 8, hidden_dims: vec![16], num_classes: 4, activation: Activation::Tanh }),
        optimizers: [OptimizerId::SgdMomentum, OptimizerId::NormGdMomentum, OptimizerId::SignMomentum, OptimizerId::AdamMomentum]
            .map(OptimizerConfig::new)
            .to_vec(),
        base_batch: 4,
        labels: BatchLabel::ALL.to_vec(),
        reference_iters: 64,
        seeds: vec![0, 1, 2],
        dropout_enabled: false,
        micro_batch: 4,
        eval_every_epochs: 1,
    };
    let result = sweep(&spec, threads, &RunCache::in_memory())?;
    for (label, b) in &result.ladder {
        let budget = &result.budgets[label];
        println!("{label:<4} batch {b:<5} {} epochs, {} iterations", budget.epochs, budget.max_iterations);
    }
    for c in result.cells.values() {
        match c.median_final_loss() {
            Some(m) => println!("{:<10} {:<4} median final loss {m:.4}", c.optimizer, c.label),
            None => println!("{:<10} {:<4} no finite step size", c.optimizer, c.label),
        }
    }

    let records: Vec<_> = result.records().into_iter().cloned().collect();
    let csv = out.join("results.csv");
    write_results(&records, &csv, WriteOptions::default())?;

    let mut scaling = PlotSpec::new(PlotKind::FinalLossVsBatchSize, &csv, "final_loss_vs_batch.svg");
    scaling.x_scale = Some(Scale::Log);
    scaling.y_scale = Some(Scale::Log);
    let mut curves = PlotSpec::new(PlotKind::LossVsIteration, &csv, "loss_full_batch.svg");
    curves.filter.insert("batch_label".into(), "Full".into());
    curves.filter.insert("seed".into(), "0".into());
    curves.y_scale = Some(Scale::Log);
    for p in [scaling, curves] {
        println!("wrote {}", emit_plot(&p, &out)?.display());
    }
    Ok(())
}

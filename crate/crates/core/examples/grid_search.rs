//! Step-size grid search for Adam on Gaussian blobs: half-decade candidates,
//! max over three seeds, edge extension and half-power refinement.

use optlab::harness::{grid_search, BatchLabel, ProblemSpec, RunCache, RunConfig};
use optlab::models::{Activation, MlpSpec, ModelSpec};
use optlab::optim::{OptimizerConfig, OptimizerId};

fn main() -> optlab::Result<()> {
    let base = RunConfig {
        problem: ProblemSpec::Blobs { n: 512, dim: 8, classes: 4, separation: 2.5, data_seed: 0, holdout_fraction: 0.0 },
        model: ModelSpec::Mlp(MlpSpec { input_dim: 8, hidden_dims: vec![16], num_classes: 4, activation: Activation::Tanh }),
        optimizer: OptimizerConfig::new(OptimizerId::AdamMomentum),
        step_size: 0.0,
        batch_label: BatchLabel::M,
        batch_size: 32,
        epochs: 3,
        max_iterations: None,
        seed: 0,
        dropout_enabled: false,
        micro_batch: 32,
        eval_every_epochs: 1,
    };
    let problem = base.problem.prepare()?;
    let cache = RunCache::in_memory();
    let result = grid_search(&base, &[0, 1, 2], &problem, &cache)?;
    for c in &result.candidates {
        let mark = if c.half_exponent == result.selected_half_exponent { "  <- selected" } else { "" };
        println!("step {:<10.3e} max over seeds {:<12.6} {:?}{mark}", c.step_size, c.max_over_seeds, c.seed_losses);
    }
    println!("rounds after the first: {}, runs trained: {}", result.refinement_rounds, cache.trained_runs());
    Ok(())
}

//! Writes a tiny IDX image/label pair, reads it back byte for byte, and
//! trains the MLP on it through a config-equivalent `ProblemSpec::Idx`.

use optlab::data::IdxArray;
use optlab::harness::{run_training, BatchLabel, ProblemSpec, RunConfig};
use optlab::models::{Activation, MlpSpec, ModelSpec};
use optlab::optim::{OptimizerConfig, OptimizerId};
use optlab::rng::{RngStream, StreamId};

fn main() -> optlab::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/idx".into()));
    std::fs::create_dir_all(&dir)?;

    // two classes of 4x4 images: bright top half or bright bottom half
    let n = 200u32;
    let mut rng = RngStream::new(0, StreamId::Fixture);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = (i % 2) as u8;
        labels.push(class);
        for p in 0..16 {
            let bright = (p < 8) == (class == 0);
            let base = if bright { 180.0 } else { 40.0 };
            pixels.push((base + rng.normal(0.0, 30.0)).clamp(0.0, 255.0) as u8);
        }
    }
    let images = IdxArray { dims: vec![n, 4, 4], data: pixels };
    let labels = IdxArray { dims: vec![n], data: labels };
    std::fs::write(dir.join("images.idx3-ubyte"), images.to_bytes())?;
    std::fs::write(dir.join("labels.idx1-ubyte"), labels.to_bytes())?;

    let raw = std::fs::read(dir.join("images.idx3-ubyte"))?;
    let parsed = IdxArray::parse(&raw)?;
    println!("magic {:#010x}, dims {:?}, round trip exact: {}", parsed.magic(), parsed.dims, parsed.to_bytes() == raw);

    let record = run_training(&RunConfig {
        problem: ProblemSpec::Idx {
            images: dir.join("images.idx3-ubyte"),
            labels: dir.join("labels.idx1-ubyte"),
            limit: None,
            holdout_fraction: 0.2,
        },
        model: ModelSpec::Mlp(MlpSpec { input_dim: 16, hidden_dims: vec![8], num_classes: 2, activation: Activation::Relu }),
        optimizer: OptimizerConfig::new(OptimizerId::SignMomentum),
        step_size: 1e-3,
        batch_label: BatchLabel::S,
        batch_size: 16,
        epochs: 5,
        max_iterations: None,
        seed: 0,
        dropout_enabled: false,
        micro_batch: 16,
        eval_every_epochs: 1,
    })?;
    for e in &record.evals {
        println!(
            "epoch {} train loss {:.4} accuracy {:.3} holdout accuracy {:?}",
            e.epoch, e.train_loss, e.train_metric, e.holdout_metric
        );
    }
    Ok(())
}

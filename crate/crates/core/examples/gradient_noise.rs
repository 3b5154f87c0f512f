//! Distribution of ‖g̃ − g‖ at initialization on the character model, with a
//! Gaussian fit, tail statistics and a QQ figure.
//!
//!     cargo run --release --example gradient_noise -- [draws] [out_dir]

use std::sync::Arc;

use optlab::harness::ProblemSpec;
use optlab::models::{ModelSpec, TransformerLmSpec};
use optlab::noise::grad_error_samples;
use optlab::plot::{emit_plot, PlotKind, PlotSpec};
use optlab::rng::{RngStream, StreamId};

fn main() -> optlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let draws: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "out/noise".into()));
    std::fs::create_dir_all(&out)?;

    let problem = ProblemSpec::CharLm {
        corpus: None,
        synth_bytes: 512 * 32 + 1,
        max_bytes: None,
        seq_len: 32,
        data_seed: 0,
        holdout_fraction: 0.0,
    }
    .prepare()?;
    let model = ModelSpec::Transformer(TransformerLmSpec {
        vocab_size: problem.vocab.as_ref().map_or(0, |v| v.len()),
        embed_dim: 64,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 64,
        seq_len: 32,
        dropout_p: 0.0,
    });
    let params = Arc::new(model.init(&mut RngStream::new(0, StreamId::Init))?);
    for batch in [4, 16] {
        let sample = grad_error_samples(&model, params.clone(), &problem.train, batch, draws, 8, 0)?;
        let csv = out.join(format!("noise_b{batch}.csv"));
        sample.write_csv(&csv)?;
        sample.write_sidecar(&out.join(format!("noise_b{batch}.json")))?;
        let s = sample.stats();
        println!(
            "batch {batch:2}: mean {:.4} sd {:.4} excess kurtosis {:.3?} tail ratio {:.3?}",
            s.fitted_mu, s.fitted_sigma, s.excess_kurtosis, s.tail_ratio_99_90
        );
        let mut qq = PlotSpec::new(PlotKind::Qq, csv, format!("qq_b{batch}.svg"));
        qq.title = Some(format!("gradient error norms, batch {batch}"));
        println!("  wrote {}", emit_plot(&qq, &out)?.display());
    }
    Ok(())
}

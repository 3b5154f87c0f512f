//! Analytic gradients of both models against central differences.

use optlab::data::{synth_classification, synth_corpus, tokenize_corpus};
use optlab::models::{Activation, MlpSpec, ModelSpec, TransformerLmSpec};
use optlab::rng::{RngStream, StreamId};
use optlab::tensor::{grad_check, Tensor};

fn main() -> optlab::Result<()> {
    let mut rng = RngStream::new(0, StreamId::Fixture);

    let mlp = ModelSpec::Mlp(MlpSpec { input_dim: 6, hidden_dims: vec![10], num_classes: 3, activation: Activation::Tanh });
    let data = synth_classification(12, 6, 3, 2.0, &mut rng)?;
    let params = mlp.init(&mut RngStream::new(0, StreamId::Init))?;
    let idx: Vec<usize> = (0..12).collect();
    let r = mlp.check_gradient(&params, &data.batch(&idx), None, 1e-4)?;
    println!("mlp: {} coordinates, worst relative error {:.2e}, passed {}", r.checked, r.worst_rel_error, r.passed);

    let text = synth_corpus(4 * 8 + 1, &mut rng);
    let (lm_data, vocab) = tokenize_corpus(&text, 8)?;
    let lm = ModelSpec::Transformer(TransformerLmSpec {
        vocab_size: vocab.len(),
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 16,
        seq_len: 8,
        dropout_p: 0.1,
    });
    let params = lm.init(&mut RngStream::new(0, StreamId::Init))?;
    let r = lm.check_gradient(&params, &lm_data.batch(&[0, 1, 2, 3]), None, 1e-4)?;
    println!("transformer: {} coordinates, worst relative error {:.2e}, passed {}", r.checked, r.worst_rel_error, r.passed);

    // |x| has no derivative at 0; the check reports it instead of failing hard
    let r = grad_check(|g, x| Ok(g.abs(x)), &Tensor::scalar(0.0)?, 1e-6)?;
    println!("|x| at 0: passed {}, kinks at {:?}", r.passed, r.kinks);
    Ok(())
}

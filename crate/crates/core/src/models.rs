//! Desk-scale models behind one loss interface: an MLP classifier, a small
//! causal character-level transformer, and a diagonal quadratic probe.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{compare_with_finite_differences, CheckReport, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerLmSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub seq_len: usize,
    pub dropout_p: f64,
}

/// `f(x) = mean_s ½ Σ_i curvature_i (x_i − c_{s,i})²` over sample centres `c_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub curvatures: Vec<f64>,
    /// Standard deviation of the initial point.
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Transformer(TransformerLmSpec),
    Quadratic(QuadraticSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All model parameters in a fixed order over one contiguous buffer.
/// Optimizer buffers align with [`ParamVector::values`] by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    slots: Vec<ParamSlot>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut slots = Vec::with_capacity(entries.len());
        let mut values = Vec::new();
        for (name, t) in entries {
            if slots.iter().any(|s: &ParamSlot| s.name == name) {
                return Err(Error::InvalidSpec(format!("duplicate parameter name {name}")));
            }
            slots.push(ParamSlot { name, shape: t.shape().to_vec(), offset: values.len() });
            values.extend_from_slice(t.data());
        }
        Ok(Self { slots, values })
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.values[s.offset..s.offset + s.numel()])
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let s = self.slot(name)?;
        Tensor::new(s.shape.clone(), self.values[s.offset..s.offset + s.numel()].to_vec()).ok()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Misaligned { expected: self.values.len(), actual: values.len() });
        }
        Ok(Self { slots: self.slots.clone(), values })
    }

    /// One requires-grad leaf per slot, in slot order.
    fn leaves(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.slots
            .iter()
            .map(|s| g.param(s.shape.clone(), self.values[s.offset..s.offset + s.numel()].to_vec()))
            .collect()
    }
}

/// A built forward pass.
pub struct Forward {
    pub graph: Graph,
    pub loss: Var,
    pub params: Vec<Var>,
    /// Attention probabilities `[batch·heads, T, T]`, one per layer.
    pub attention: Vec<Var>,
    /// Output logits (classification and LM models).
    pub logits: Option<Var>,
}

impl Forward {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss)[0]
    }

    /// Runs backward and flattens the gradient in parameter order.
    pub fn gradient(&mut self) -> Result<Vec<f64>> {
        let grads = self.graph.backward(self.loss)?;
        let mut flat = Vec::new();
        for &p in &self.params {
            flat.extend_from_slice(grads.get(p).expect("parameter leaf has a gradient"));
        }
        Ok(flat)
    }
}

fn sinusoidal_positions(seq_len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

struct Init<'a> {
    rng: &'a mut RngStream,
    entries: Vec<(String, Tensor)>,
}

impl Init<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        let t = Tensor::new(shape, data).expect("finite initial values");
        self.entries.push((name, t));
    }

    /// `[fan_in, fan_out]` weight, uniform in ±1/sqrt(fan_in).
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| self.rng.uniform(-bound, bound)).collect();
        self.push(format!("{name}.w"), vec![fan_in, fan_out], w);
        self.push(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]);
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.gain"), vec![dim], vec![1.0; dim]);
        self.push(format!("{name}.bias"), vec![dim], vec![0.0; dim]);
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("MLP needs positive input and at least one hidden layer".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("MLP needs at least two classes".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }
}

impl TransformerLmSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab_size, self.embed_dim, self.num_layers, self.num_heads, self.ff_dim, self.seq_len];
        if positive.contains(&0) {
            return Err(Error::InvalidSpec("transformer sizes must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidSpec("seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidSpec(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => s.validate(),
            ModelSpec::Transformer(s) => s.validate(),
            ModelSpec::Quadratic(s) => {
                if s.curvatures.is_empty() || s.curvatures.iter().any(|h| !h.is_finite() || *h < 0.0) {
                    Err(Error::InvalidSpec("quadratic curvatures must be finite and nonnegative".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp(_) => "mlp",
            ModelSpec::Transformer(_) => "transformer",
            ModelSpec::Quadratic(_) => "quadratic",
        }
    }

    /// Name of the per-epoch evaluation metric.
    pub fn metric_name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp(_) => "accuracy",
            ModelSpec::Transformer(_) => "perplexity",
            ModelSpec::Quadratic(_) => "loss",
        }
    }

    pub fn dropout_p(&self) -> f64 {
        match self {
            ModelSpec::Transformer(s) => s.dropout_p,
            _ => 0.0,
        }
    }

    pub fn without_dropout(&self) -> ModelSpec {
        let mut spec = self.clone();
        if let ModelSpec::Transformer(s) = &mut spec {
            s.dropout_p = 0.0;
        }
        spec
    }

    /// Weights uniform in ±1/sqrt(fan_in), biases zero, layer-norm gain 1 and
    /// bias 0, embeddings normal(0, 0.02).
    pub fn init(&self, rng: &mut RngStream) -> Result<ParamVector> {
        self.validate()?;
        let mut init = Init { rng, entries: Vec::new() };
        match self {
            ModelSpec::Mlp(s) => {
                for (i, w) in s.layer_dims().windows(2).enumerate() {
                    init.linear(&format!("layer{i}"), w[0], w[1]);
                }
            }
            ModelSpec::Transformer(s) => {
                let d = s.embed_dim;
                let emb = (0..s.vocab_size * d).map(|_| init.rng.normal(0.0, 0.02)).collect();
                init.push("tok_embed".into(), vec![s.vocab_size, d], emb);
                for l in 0..s.num_layers {
                    init.layer_norm(&format!("block{l}.ln1"), d);
                    for proj in ["q", "k", "v", "o"] {
                        init.linear(&format!("block{l}.attn.{proj}"), d, d);
                    }
                    init.layer_norm(&format!("block{l}.ln2"), d);
                    init.linear(&format!("block{l}.ff1"), d, s.ff_dim);
                    init.linear(&format!("block{l}.ff2"), s.ff_dim, d);
                }
                init.layer_norm("ln_f", d);
                init.linear("head", d, s.vocab_size);
            }
            ModelSpec::Quadratic(s) => {
                let x = (0..s.curvatures.len()).map(|_| init.rng.normal(0.0, s.init_scale.max(0.0))).collect();
                init.push("x".into(), vec![s.curvatures.len()], x);
            }
        }
        ParamVector::from_entries(init.entries)
    }

    /// Builds the mean training loss of `batch`. `dropout` supplies masks in
    /// train mode; eval mode never draws from it.
    pub fn forward_loss(
        &self,
        params: &ParamVector,
        batch: &Batch,
        mode: Mode,
        dropout: &mut RngStream,
    ) -> Result<Forward> {
        let mut graph = Graph::new();
        let leaves = params.leaves(&mut graph)?;
        let g = &mut graph;
        let mut attention = Vec::new();
        let (loss, logits) = match (self, batch) {
            (ModelSpec::Mlp(s), Batch::Classification { inputs, dim, labels }) => {
                if *dim != s.input_dim {
                    return Err(Error::ShapeMismatch(format!("input dim {dim} vs spec {}", s.input_dim)));
                }
                let (loss, logits) = mlp_forward(s, g, &leaves, inputs, labels)?;
                (loss, Some(logits))
            }
            (ModelSpec::Transformer(s), Batch::Tokens { inputs, targets, seq_len }) => {
                if *seq_len != s.seq_len {
                    return Err(Error::ShapeMismatch(format!("sequence length {seq_len} vs spec {}", s.seq_len)));
                }
                let p = if mode == Mode::Train { s.dropout_p } else { 0.0 };
                let (loss, logits) = transformer_forward(s, g, &leaves, &mut attention, inputs, targets, p, dropout)?;
                (loss, Some(logits))
            }
            (ModelSpec::Quadratic(s), Batch::Points { centers, dim }) => {
                if *dim != s.curvatures.len() {
                    return Err(Error::ShapeMismatch(format!("point dim {dim} vs {}", s.curvatures.len())));
                }
                (quadratic_forward(s, g, leaves[0], centers)?, None)
            }
            _ => return Err(Error::ShapeMismatch(format!("{} model cannot consume this batch", self.name()))),
        };
        Ok(Forward { graph, loss, params: leaves, attention, logits })
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch, mode: Mode, dropout: &mut RngStream) -> Result<f64> {
        Ok(self.forward_loss(params, batch, mode, dropout)?.loss_value())
    }

    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Batch,
        mode: Mode,
        dropout: &mut RngStream,
    ) -> Result<(f64, Vec<f64>)> {
        let mut fwd = self.forward_loss(params, batch, mode, dropout)?;
        let loss = fwd.loss_value();
        Ok((loss, fwd.gradient()?))
    }

    /// Eval-mode loss and metric (accuracy, perplexity, or the loss itself).
    pub fn evaluate(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
        let mut unused = RngStream::new(0, crate::rng::StreamId::Dropout);
        let fwd = self.forward_loss(params, batch, Mode::Eval, &mut unused)?;
        let loss = fwd.loss_value();
        let metric = match (self, batch) {
            (ModelSpec::Mlp(s), Batch::Classification { labels, .. }) => {
                let logits = fwd.graph.value(fwd.logits.expect("mlp logits"));
                let correct = logits
                    .chunks(s.num_classes)
                    .zip(labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                correct as f64 / labels.len() as f64
            }
            (ModelSpec::Transformer(_), _) => loss.exp(),
            _ => loss,
        };
        Ok((loss, metric))
    }

    /// Mean loss and gradient over `indices`, accumulated over micro-batches
    /// weighted by their size. Micro-batch `j` draws dropout masks from
    /// `dropout.substream(j)`.
    pub fn accumulate(
        &self,
        params: &ParamVector,
        dataset: &Dataset,
        indices: &[usize],
        micro_batch: usize,
        mode: Mode,
        dropout: &RngStream,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.total_dim()];
        let mut loss = 0.0;
        let n = indices.len() as f64;
        for (j, chunk) in indices.chunks(micro_batch.max(1)).enumerate() {
            let mut rng = dropout.substream(j as u64);
            let (l, g) = self.loss_and_grad(params, &dataset.batch(chunk), mode, &mut rng)?;
            let w = chunk.len() as f64 / n;
            loss += w * l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += w * gi;
            }
        }
        Ok((loss, grad))
    }

    /// Eval-mode loss and metric over a whole dataset in chunks.
    pub fn evaluate_dataset(&self, params: &ParamVector, dataset: &Dataset, micro_batch: usize) -> Result<(f64, f64)> {
        let indices: Vec<usize> = (0..dataset.n_samples()).collect();
        let n = indices.len() as f64;
        let (mut loss, mut metric) = (0.0, 0.0);
        for chunk in indices.chunks(micro_batch.max(1)) {
            let (l, m) = self.evaluate(params, &dataset.batch(chunk))?;
            let w = chunk.len() as f64 / n;
            loss += w * l;
            metric += w * m;
        }
        match self {
            ModelSpec::Transformer(_) => Ok((loss, loss.exp())),
            ModelSpec::Quadratic(_) => Ok((loss, loss)),
            ModelSpec::Mlp(_) => Ok((loss, metric)),
        }
    }

    /// Eval-mode gradient check of the batch loss with respect to the flat
    /// parameter vector, on `coords` or on every coordinate.
    pub fn check_gradient(
        &self,
        params: &ParamVector,
        batch: &Batch,
        coords: Option<&[usize]>,
        rel_tol: f64,
    ) -> Result<CheckReport> {
        let mut unused = RngStream::new(0, crate::rng::StreamId::Dropout);
        let (_, analytic) = self.loss_and_grad(params, batch, Mode::Eval, &mut unused)?;
        compare_with_finite_differences(
            |v| {
                let probe = params.with_values(v.to_vec())?;
                self.loss(&probe, batch, Mode::Eval, &mut RngStream::new(0, crate::rng::StreamId::Dropout))
            },
            params.values(),
            &analytic,
            coords,
            rel_tol,
        )
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn mlp_forward(s: &MlpSpec, g: &mut Graph, params: &[Var], inputs: &[f64], labels: &[usize]) -> Result<(Var, Var)> {
    let n = labels.len();
    let mut h = g.constant(vec![n, s.input_dim], inputs.to_vec())?;
    let layers = s.hidden_dims.len() + 1;
    for l in 0..layers {
        let (w, b) = (params[2 * l], params[2 * l + 1]);
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        h = if l + 1 < layers {
            match s.activation {
                Activation::Tanh => g.tanh(z),
                Activation::Relu => g.relu(z),
            }
        } else {
            z
        };
    }
    Ok((g.cross_entropy(h, labels)?, h))
}

fn dropout_mask(g: &mut Graph, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    g.dropout(x, mask)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

#[allow(clippy::too_many_arguments)]
fn transformer_forward(
    s: &TransformerLmSpec,
    g: &mut Graph,
    p: &[Var],
    attention: &mut Vec<Var>,
    inputs: &[usize],
    targets: &[usize],
    dropout_p: f64,
    rng: &mut RngStream,
) -> Result<(Var, Var)> {
    if let Some(&id) = inputs.iter().chain(targets).find(|&&t| t >= s.vocab_size) {
        return Err(Error::VocabOverflow { id, vocab: s.vocab_size });
    }
    let (t, d, h) = (s.seq_len, s.embed_dim, s.num_heads);
    let dh = d / h;
    let bsz = inputs.len() / t;
    // parameter layout follows ModelSpec::init
    let mut k = 0;
    let mut next = || {
        k += 1;
        p[k - 1]
    };

    let table = next();
    let emb = g.embedding(table, inputs)?;
    let emb = g.scale(emb, (d as f64).sqrt())?;
    let emb = g.reshape(emb, vec![bsz, t, d])?;
    let pe = g.constant(vec![t, d], sinusoidal_positions(t, d))?;
    let x = g.add(emb, pe)?;
    let x = g.reshape(x, vec![bsz * t, d])?;
    let mut x = dropout_mask(g, x, dropout_p, rng)?;

    let split_heads = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.reshape(v, vec![bsz, t, h, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, vec![bsz * h, t, dh])
    };

    for _ in 0..s.num_layers {
        let (g1, b1) = (next(), next());
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (next(), next(), next(), next(), next(), next(), next(), next());
        let (g2, b2) = (next(), next());
        let (w1, c1, w2, c2) = (next(), next(), next(), next());

        let hn = g.layer_norm(x, g1, b1)?;
        let q = linear(g, hn, wq, bq)?;
        let kk = linear(g, hn, wk, bk)?;
        let v = linear(g, hn, wv, bv)?;
        let q = split_heads(g, q)?;
        let kk = split_heads(g, kk)?;
        let v = split_heads(g, v)?;
        let kt = g.transpose(kk)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = g.causal_softmax(scores)?;
        attention.push(att);
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, vec![bsz, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![bsz * t, d])?;
        let o = linear(g, ctx, wo, bo)?;
        let o = dropout_mask(g, o, dropout_p, rng)?;
        x = g.add(x, o)?;

        let hn = g.layer_norm(x, g2, b2)?;
        let f = linear(g, hn, w1, c1)?;
        let f = g.relu(f);
        let f = linear(g, f, w2, c2)?;
        let f = dropout_mask(g, f, dropout_p, rng)?;
        x = g.add(x, f)?;
    }

    let (gf, bf) = (next(), next());
    let (wh, bh) = (next(), next());
    let x = g.layer_norm(x, gf, bf)?;
    let logits = linear(g, x, wh, bh)?;
    Ok((g.cross_entropy(logits, targets)?, logits))
}

fn quadratic_forward(s: &QuadraticSpec, g: &mut Graph, x: Var, centers: &[f64]) -> Result<Var> {
    let dim = s.curvatures.len();
    let n = centers.len() / dim;
    let neg_c = g.constant(vec![n, dim], centers.iter().map(|c| -c).collect())?;
    let diff = g.add(neg_c, x)?;
    let sq = g.mul(diff, diff)?;
    let h = g.constant(vec![n, dim], s.curvatures.iter().cycle().take(n * dim).copied().collect())?;
    let weighted = g.mul(sq, h)?;
    let total = g.sum(weighted);
    g.scale(total, 0.5 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize_corpus, Dataset};
    use crate::rng::StreamId;

    pub(crate) fn tiny_lm() -> TransformerLmSpec {
        TransformerLmSpec {
            vocab_size: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            seq_len: 16,
            dropout_p: 0.1,
        }
    }

    fn lm_batch(spec: &TransformerLmSpec, n: usize, seed: u64) -> Batch {
        let mut rng = RngStream::new(seed, StreamId::Fixture);
        let total = n * spec.seq_len;
        let ids: Vec<usize> = (0..total + 1).map(|_| (rand::RngCore::next_u64(&mut rng) % spec.vocab_size as u64) as usize).collect();
        Batch::Tokens { inputs: ids[..total].to_vec(), targets: ids[1..].to_vec(), seq_len: spec.seq_len }
    }

    #[test]
    fn mlp_parameter_count() {
        let spec = ModelSpec::Mlp(MlpSpec { input_dim: 4, hidden_dims: vec![8], num_classes: 3, activation: Activation::Tanh });
        let p = spec.init(&mut RngStream::new(0, StreamId::Init)).unwrap();
        assert_eq!(p.total_dim(), 67);
    }

    #[test]
    fn init_is_deterministic_and_layer_norms_start_at_one() {
        let spec = ModelSpec::Transformer(tiny_lm());
        let a = spec.init(&mut RngStream::new(9, StreamId::Init)).unwrap();
        let b = spec.init(&mut RngStream::new(9, StreamId::Init)).unwrap();
        assert_eq!(a, b);
        let gains: Vec<&ParamSlot> = a.slots().iter().filter(|s| s.name.ends_with(".gain")).collect();
        assert_eq!(gains.len(), 5);
        for s in gains {
            assert!(a.get(&s.name).unwrap().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny_lm();
        s.num_heads = 3;
        assert!(matches!(ModelSpec::Transformer(s).init(&mut RngStream::new(0, StreamId::Init)), Err(Error::InvalidSpec(_))));
        let m = MlpSpec { input_dim: 2, hidden_dims: vec![], num_classes: 2, activation: Activation::Relu };
        assert!(m.validate().is_err());
    }

    #[test]
    fn untrained_lm_loss_near_log_vocab() {
        let spec = ModelSpec::Transformer(tiny_lm());
        let p = spec.init(&mut RngStream::new(1, StreamId::Init)).unwrap();
        let batch = lm_batch(&tiny_lm(), 4, 2);
        let mut drop = RngStream::new(1, StreamId::Dropout);
        let loss = spec.loss(&p, &batch, Mode::Eval, &mut drop).unwrap();
        let target = 64f64.ln();
        assert!((loss - target).abs() / target < 0.15, "loss {loss}");
    }

    #[test]
    fn eval_is_deterministic_and_zero_dropout_matches_eval() {
        let mut s = tiny_lm();
        let batch = lm_batch(&s, 3, 4);
        let spec = ModelSpec::Transformer(s.clone());
        let p = spec.init(&mut RngStream::new(1, StreamId::Init)).unwrap();
        let mut r = RngStream::new(1, StreamId::Dropout);
        let a = spec.loss(&p, &batch, Mode::Eval, &mut r).unwrap();
        let b = spec.loss(&p, &batch, Mode::Eval, &mut r).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let train = spec.loss(&p, &batch, Mode::Train, &mut r).unwrap();
        assert_ne!(train.to_bits(), a.to_bits());
        s.dropout_p = 0.0;
        let spec0 = ModelSpec::Transformer(s);
        let c = spec0.loss(&p, &batch, Mode::Train, &mut r).unwrap();
        assert_eq!(c.to_bits(), a.to_bits());
    }

    #[test]
    fn vocab_overflow() {
        let spec = ModelSpec::Transformer(tiny_lm());
        let p = spec.init(&mut RngStream::new(1, StreamId::Init)).unwrap();
        let mut inputs = vec![0; 16];
        inputs[3] = 64;
        let batch = Batch::Tokens { inputs, targets: vec![0; 16], seq_len: 16 };
        let mut r = RngStream::new(1, StreamId::Dropout);
        assert!(matches!(spec.loss(&p, &batch, Mode::Eval, &mut r), Err(Error::VocabOverflow { id: 64, vocab: 64 })));
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_causal() {
        let spec = ModelSpec::Transformer(tiny_lm());
        let p = spec.init(&mut RngStream::new(3, StreamId::Init)).unwrap();
        let batch = lm_batch(&tiny_lm(), 2, 5);
        let mut r = RngStream::new(1, StreamId::Dropout);
        let fwd = spec.forward_loss(&p, &batch, Mode::Eval, &mut r).unwrap();
        assert_eq!(fwd.attention.len(), 2);
        for &att in &fwd.attention {
            for (row_idx, row) in fwd.graph.value(att).chunks(16).enumerate() {
                let i = row_idx % 16;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let text = crate::data::synth_corpus(2000, &mut RngStream::new(0, StreamId::Fixture));
        let (ds, vocab) = tokenize_corpus(&text, 16).unwrap();
        let mut s = tiny_lm();
        s.vocab_size = vocab.len();
        let spec = ModelSpec::Transformer(s);
        let p = spec.init(&mut RngStream::new(0, StreamId::Init)).unwrap();
        let mut r = RngStream::new(0, StreamId::Dropout);
        let a = spec.loss(&p, &ds.batch(&[0, 1, 2, 3, 4]), Mode::Eval, &mut r).unwrap();
        let b = spec.loss(&p, &ds.batch(&[3, 1, 4, 0, 2]), Mode::Eval, &mut r).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(ds, Dataset::LanguageModeling(_)));
    }

    #[test]
    fn quadratic_loss_and_gradient() {
        let spec = ModelSpec::Quadratic(QuadraticSpec { curvatures: vec![1.0, 2.0], init_scale: 1.0 });
        let p = ParamVector::from_entries(vec![("x".into(), Tensor::from_vec(vec![1.0, -1.0]).unwrap())]).unwrap();
        let batch = Batch::Points { centers: vec![0.0, 0.0, 2.0, 0.0], dim: 2 };
        let mut r = RngStream::new(0, StreamId::Dropout);
        let (loss, grad) = spec.loss_and_grad(&p, &batch, Mode::Eval, &mut r).unwrap();
        // ½[(1 + 2) + (1 + 2)] / 2
        assert!((loss - 1.5).abs() < 1e-15);
        // mean of h∘(x − c): [(1 + -1)/2, (-2 + -2)/2]
        assert_eq!(grad, vec![0.0, -2.0]);
    }
}

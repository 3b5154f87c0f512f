//! Experiment protocol: batch-size ladder, iteration budgets, training runs,
//! step-size grid search and the optimizer × batch-size sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, trim_for_even_division, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerId, StepOutcome};
use crate::rng::{RngStream, StreamId};

pub const CACHE_ENV: &str = "OPTLAB_CACHE_DIR";

/// Integer powers `10^-5 … 10^0`, stored as half-decade exponents.
const FIRST_ROUND: std::ops::RangeInclusive<i32> = -10..=0;
/// Edge extensions stop after this many decades on either side.
const MAX_EXTENSIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BatchLabel {
    S,
    M,
    L,
    XL,
    Full,
}

impl BatchLabel {
    pub const ALL: [BatchLabel; 5] = [BatchLabel::S, BatchLabel::M, BatchLabel::L, BatchLabel::XL, BatchLabel::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            BatchLabel::S => "S",
            BatchLabel::M => "M",
            BatchLabel::L => "L",
            BatchLabel::XL => "XL",
            BatchLabel::Full => "Full",
        }
    }
}

impl fmt::Display for BatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BatchLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BatchLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::schema("batch_label", format!("unknown batch label {s:?}")))
    }
}

/// `S=base, M=4·base, L=16·base, XL=64·base, Full=kept`.
pub fn batch_size_ladder(base: usize, dataset_kept: usize) -> Result<Vec<(BatchLabel, usize)>> {
    let top = base.saturating_mul(64);
    if base == 0 || top >= dataset_kept {
        return Err(Error::LadderTooTall { top, kept: dataset_kept });
    }
    Ok(vec![
        (BatchLabel::S, base),
        (BatchLabel::M, 4 * base),
        (BatchLabel::L, 16 * base),
        (BatchLabel::XL, top),
        (BatchLabel::Full, dataset_kept),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingBudget {
    pub epochs: usize,
    pub max_iterations: usize,
    /// Budget falls outside a factor of 2 of the reference.
    pub flagged: bool,
}

/// Whole-epoch budgets of at least `reference_iters` iterations, never less
/// than one epoch. The Full entry of the ladder fixes the dataset size.
pub fn stopping_iterations(
    ladder: &[(BatchLabel, usize)],
    reference_iters: usize,
) -> Result<BTreeMap<BatchLabel, StoppingBudget>> {
    if reference_iters == 0 {
        return Err(Error::schema("reference_iters", "must be at least 1"));
    }
    let kept = ladder
        .iter()
        .map(|&(_, b)| b)
        .max()
        .ok_or_else(|| Error::schema("ladder", "empty ladder"))?;
    let mut out = BTreeMap::new();
    for &(label, batch) in ladder {
        let per_epoch = (kept / batch).max(1);
        let epochs = reference_iters.div_ceil(per_epoch).max(1);
        let iters = epochs * per_epoch;
        let flagged = iters > 2 * reference_iters || 2 * iters < reference_iters;
        out.insert(label, StoppingBudget { epochs, max_iterations: iters, flagged });
    }
    Ok(out)
}

// ---- problems ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Character windows from a text file, or from the built-in generator
    /// when `corpus` is absent.
    CharLm {
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default = "default_synth_bytes")]
        synth_bytes: usize,
        #[serde(default)]
        max_bytes: Option<usize>,
        seq_len: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default)]
        holdout_fraction: f64,
    },
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        data_seed: u64,
        #[serde(default)]
        holdout_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        holdout_fraction: f64,
    },
    Quadratic {
        n: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_synth_bytes() -> usize {
    200_000
}

impl ProblemSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemSpec::CharLm { .. } => "char_lm",
            ProblemSpec::Blobs { .. } => "blobs",
            ProblemSpec::Idx { .. } => "idx",
            ProblemSpec::Quadratic { .. } => "quadratic",
        }
    }

    fn holdout_fraction(&self) -> f64 {
        match self {
            ProblemSpec::CharLm { holdout_fraction, .. }
            | ProblemSpec::Blobs { holdout_fraction, .. }
            | ProblemSpec::Idx { holdout_fraction, .. } => *holdout_fraction,
            ProblemSpec::Quadratic { .. } => 0.0,
        }
    }

    pub fn prepare(&self) -> Result<PreparedProblem> {
        let mut vocab = None;
        let full = match self {
            ProblemSpec::CharLm { corpus, synth_bytes, max_bytes, seq_len, data_seed, .. } => {
                let mut text = match corpus {
                    Some(path) => std::fs::read(path)?,
                    None => data::synth_corpus(*synth_bytes, &mut RngStream::new(*data_seed, StreamId::Fixture)),
                };
                if let Some(max) = max_bytes {
                    text.truncate(*max);
                }
                let (ds, v) = data::tokenize_corpus(&text, *seq_len)?;
                vocab = Some(v);
                ds
            }
            ProblemSpec::Blobs { n, dim, classes, separation, data_seed, .. } => {
                data::synth_classification(*n, *dim, *classes, *separation, &mut RngStream::new(*data_seed, StreamId::Fixture))?
            }
            ProblemSpec::Idx { images, labels, limit, .. } => {
                let ds = data::load_idx(images, labels)?;
                match limit {
                    Some(l) if *l < ds.n_samples() => ds.truncate(*l),
                    _ => ds,
                }
            }
            ProblemSpec::Quadratic { n, dim, spread, data_seed } => {
                data::synth_points(*n, *dim, *spread, &mut RngStream::new(*data_seed, StreamId::Fixture))?
            }
        };
        let (train, holdout) = full.split_holdout(self.holdout_fraction())?;
        Ok(PreparedProblem { train: Arc::new(train), holdout: holdout.map(Arc::new), vocab })
    }
}

/// A loaded training set with its optional holdout split.
#[derive(Clone, Debug)]
pub struct PreparedProblem {
    pub train: Arc<Dataset>,
    pub holdout: Option<Arc<Dataset>>,
    pub vocab: Option<Vocabulary>,
}

impl PreparedProblem {
    pub fn from_dataset(train: Dataset) -> Self {
        Self { train: Arc::new(train), holdout: None, vocab: None }
    }
}

// ---- runs ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub step_size: f64,
    pub batch_label: BatchLabel,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iterations: Option<usize>,
    pub seed: u64,
    pub dropout_enabled: bool,
    pub micro_batch: usize,
    /// Full-dataset evaluation every this many epochs; the last epoch is
    /// always evaluated.
    pub eval_every_epochs: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::schema("step_size", "must be finite and nonnegative"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("micro_batch", self.micro_batch),
            ("eval_every_epochs", self.eval_every_epochs),
        ] {
            if v == 0 {
                return Err(Error::schema(name, "must be at least 1"));
            }
        }
        if self.max_iterations == Some(0) {
            return Err(Error::schema("max_iterations", "must be at least 1"));
        }
        Ok(())
    }

    /// Content hash of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn effective_model(&self) -> ModelSpec {
        if self.dropout_enabled {
            self.model.clone()
        } else {
            self.model.without_dropout()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub epoch: u64,
    #[serde(with = "json_f64")]
    pub train_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: u64,
    pub iteration: u64,
    /// Eval-mode loss over the whole training set.
    #[serde(with = "json_f64")]
    pub train_loss: f64,
    #[serde(with = "json_f64")]
    pub train_metric: f64,
    #[serde(default)]
    pub holdout_loss: Option<f64>,
    #[serde(default)]
    pub holdout_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub iterations: Vec<IterationLog>,
    pub evals: Vec<EpochEval>,
    pub metric_name: String,
    #[serde(with = "json_f64")]
    pub final_train_loss: f64,
    pub diverged: bool,
    pub wall_ms: u64,
    pub zero_gradient_skips: u64,
}

impl RunRecord {
    /// The final loss as scored by grid search: +∞ when diverged.
    pub fn score(&self) -> f64 {
        if self.diverged || !self.final_train_loss.is_finite() {
            f64::INFINITY
        } else {
            self.final_train_loss
        }
    }
}

/// Non-finite floats travel as the strings "NaN", "inf" and "-inf".
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Loads the problem and trains.
pub fn run_training(config: &RunConfig) -> Result<RunRecord> {
    run_training_on(config, &config.problem.prepare()?)
}

/// Trains `config` on an already prepared problem. Configuration errors are
/// returned; a non-finite loss or parameter ends the run and marks it
/// diverged.
pub fn run_training_on(config: &RunConfig, problem: &PreparedProblem) -> Result<RunRecord> {
    config.validate()?;
    let model = config.effective_model();
    let train = &problem.train;
    let n = train.n_samples();
    let full = config.batch_label == BatchLabel::Full;
    if config.batch_size > n {
        return Err(Error::BatchTooLarge { batch_size: config.batch_size, available: n });
    }
    trim_for_even_division(n, config.batch_size, full)?;
    if let (ModelSpec::Transformer(s), Some(v)) = (&model, &problem.vocab) {
        if s.vocab_size < v.len() {
            return Err(Error::InvalidSpec(format!("vocab_size {} below corpus vocabulary {}", s.vocab_size, v.len())));
        }
    }

    let start = Instant::now();
    let mut params = model.init(&mut RngStream::new(config.seed, StreamId::Init))?;
    let mut optimizer = config.optimizer.build(config.step_size, params.total_dim());
    let order_rng = RngStream::new(config.seed, StreamId::DataOrder);
    let dropout_rng = RngStream::new(config.seed, StreamId::Dropout);
    let max_iters = config.max_iterations.unwrap_or(usize::MAX) as u64;

    let mut iterations = Vec::new();
    let mut evals = Vec::new();
    let mut iteration = 0u64;
    let mut diverged = false;
    let mut last_eval_iteration = None;

    let evaluate = |params: &_, epoch: u64, iteration: u64| -> Result<EpochEval> {
        let (train_loss, train_metric) = model.evaluate_dataset(params, train, config.micro_batch)?;
        let (holdout_loss, holdout_metric) = match &problem.holdout {
            Some(h) => {
                let (l, m) = model.evaluate_dataset(params, h, config.micro_batch)?;
                (Some(l), Some(m))
            }
            None => (None, None),
        };
        Ok(EpochEval { epoch, iteration, train_loss, train_metric, holdout_loss, holdout_metric })
    };

    'epochs: for epoch in 0..config.epochs as u64 {
        let plan = data::make_batches(n, config.batch_size, config.micro_batch, full, epoch, &order_rng)?;
        for batch in plan.batches() {
            if iteration >= max_iters {
                break 'epochs;
            }
            let step = model.accumulate(
                &params,
                train,
                batch,
                plan.micro_batch,
                Mode::Train,
                &dropout_rng.substream(iteration),
            );
            iteration += 1;
            let (loss, grad) = match step {
                Ok(lg) => lg,
                Err(Error::NonFinite(_)) => (f64::NAN, Vec::new()),
                Err(e) => return Err(e),
            };
            iterations.push(IterationLog {
                iteration,
                epoch,
                train_loss: loss,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            match optimizer.step(params.values_mut(), &grad) {
                Ok(StepOutcome::Applied) | Ok(StepOutcome::ZeroGradientSkipped) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if params.values().iter().any(|v| !v.is_finite()) {
                diverged = true;
                break 'epochs;
            }
        }
        let last_epoch = epoch + 1 == config.epochs as u64 || iteration >= max_iters;
        if last_epoch || (epoch + 1) % config.eval_every_epochs as u64 == 0 {
            match evaluate(&params, epoch, iteration) {
                Ok(e) if e.train_loss.is_finite() => {
                    evals.push(e);
                    last_eval_iteration = Some(iteration);
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    if !diverged && last_eval_iteration != Some(iteration) {
        let epoch = iterations.last().map_or(0, |l| l.epoch);
        match evaluate(&params, epoch, iteration) {
            Ok(e) if e.train_loss.is_finite() => evals.push(e),
            Ok(_) | Err(Error::NonFinite(_)) => diverged = true,
            Err(e) => return Err(e),
        }
    }

    let final_train_loss = if diverged {
        f64::INFINITY
    } else {
        evals.last().map_or(f64::INFINITY, |e| e.train_loss)
    };
    Ok(RunRecord {
        run_id: config.run_id(),
        config: config.clone(),
        iterations,
        evals,
        metric_name: model.metric_name().to_string(),
        final_train_loss,
        diverged: diverged || !final_train_loss.is_finite(),
        wall_ms: start.elapsed().as_millis() as u64,
        zero_gradient_skips: optimizer.zero_gradient_skips(),
    })
}

// ---- result cache ----

/// Records keyed by run id, in memory and optionally on disk.
#[derive(Debug, Default)]
pub struct RunCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, RunRecord>>,
    trained: AtomicUsize,
}

impl RunCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    /// Disk-backed when the cache environment variable is set.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::with_dir(PathBuf::from(dir)),
            _ => Ok(Self::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Runs actually trained (not served from the cache).
    pub fn trained_runs(&self) -> usize {
        self.trained.load(Ordering::Relaxed)
    }

    fn path_for(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    pub fn get(&self, id: &str) -> Option<RunRecord> {
        if let Some(r) = self.memory.lock().expect("cache lock").get(id) {
            return Some(r.clone());
        }
        let text = std::fs::read(self.path_for(id)?).ok()?;
        let record: RunRecord = serde_json::from_slice(&text).ok()?;
        if record.run_id != id {
            return None;
        }
        self.memory.lock().expect("cache lock").insert(id.to_string(), record.clone());
        Some(record)
    }

    fn put(&self, record: &RunRecord) -> Result<()> {
        if let Some(path) = self.path_for(&record.run_id) {
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, serde_json::to_vec(record)?)?;
            std::fs::rename(&tmp, &path)?;
        }
        self.memory.lock().expect("cache lock").insert(record.run_id.clone(), record.clone());
        Ok(())
    }

    pub fn run(&self, config: &RunConfig, problem: &PreparedProblem) -> Result<RunRecord> {
        let id = config.run_id();
        if let Some(r) = self.get(&id) {
            return Ok(r);
        }
        let record = run_training_on(config, problem)?;
        self.trained.fetch_add(1, Ordering::Relaxed);
        self.put(&record)?;
        Ok(record)
    }
}

// ---- grid search ----

/// Step sizes are `10^(e/2)` for integer half-decade exponents `e`.
pub fn step_from_half_exponent(e: i32) -> f64 {
    if e % 2 == 0 {
        format!("1e{}", e / 2).parse().expect("valid literal")
    } else {
        10f64.powf(e as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub half_exponent: i32,
    pub step_size: f64,
    pub seed_losses: Vec<f64>,
    /// +∞ when any seed diverged.
    pub max_over_seeds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Ordered by step size.
    pub candidates: Vec<GridCandidate>,
    pub selected: f64,
    pub selected_half_exponent: i32,
    /// Rounds after the first: edge extensions plus the half-power round.
    pub refinement_rounds: usize,
}

impl GridResult {
    pub fn candidate(&self, half_exponent: i32) -> Option<&GridCandidate> {
        self.candidates.iter().find(|c| c.half_exponent == half_exponent)
    }
}

fn max_over_seeds(losses: &[f64]) -> f64 {
    if losses.iter().any(|l| !l.is_finite()) {
        f64::INFINITY
    } else {
        losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn best(candidates: &BTreeMap<i32, GridCandidate>) -> Option<i32> {
    candidates
        .values()
        .filter(|c| c.max_over_seeds.is_finite())
        .min_by(|a, b| a.max_over_seeds.total_cmp(&b.max_over_seeds).then(a.half_exponent.cmp(&b.half_exponent)))
        .map(|c| c.half_exponent)
}

/// Grid search over a final-loss oracle `eval(step_size, seed)`.
/// Non-finite losses count as diverged. Candidates within a round are
/// evaluated in parallel; the result does not depend on evaluation order.
pub fn grid_search_with<F>(seeds: &[u64], eval: F) -> Result<GridResult>
where
    F: Fn(f64, u64) -> Result<f64> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::schema("seeds", "at least one seed required"));
    }
    let mut candidates: BTreeMap<i32, GridCandidate> = BTreeMap::new();
    let evaluate = |exps: Vec<i32>, candidates: &mut BTreeMap<i32, GridCandidate>| -> Result<()> {
        let fresh: Vec<i32> = exps.into_iter().filter(|e| !candidates.contains_key(e)).collect();
        let jobs: Vec<(i32, u64)> = fresh
            .iter()
            .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
            .collect();
        let losses = jobs
            .par_iter()
            .map(|&(e, s)| eval(step_from_half_exponent(e), s))
            .collect::<Result<Vec<f64>>>()?;
        for (e, chunk) in fresh.iter().zip(losses.chunks(seeds.len())) {
            let seed_losses = chunk.to_vec();
            candidates.insert(
                *e,
                GridCandidate {
                    half_exponent: *e,
                    step_size: step_from_half_exponent(*e),
                    max_over_seeds: max_over_seeds(&seed_losses),
                    seed_losses,
                },
            );
        }
        Ok(())
    };

    evaluate(FIRST_ROUND.step_by(2).collect(), &mut candidates)?;
    let mut rounds = 0;
    let (mut lo, mut hi) = (*FIRST_ROUND.start(), *FIRST_ROUND.end());
    let mut extensions = 0;
    loop {
        let winner = best(&candidates).ok_or(Error::AllDiverged)?;
        if extensions >= MAX_EXTENSIONS {
            break;
        }
        let next = if winner == hi {
            hi += 2;
            hi
        } else if winner == lo {
            lo -= 2;
            lo
        } else {
            break;
        };
        evaluate(vec![next], &mut candidates)?;
        rounds += 1;
        extensions += 1;
    }
    let winner = best(&candidates).ok_or(Error::AllDiverged)?;
    evaluate(vec![winner - 1, winner + 1], &mut candidates)?;
    rounds += 1;
    let selected = best(&candidates).ok_or(Error::AllDiverged)?;
    Ok(GridResult {
        selected: step_from_half_exponent(selected),
        selected_half_exponent: selected,
        candidates: candidates.into_values().collect(),
        refinement_rounds: rounds,
    })
}

/// Grid search of `base.step_size` using training runs; every (step, seed)
/// record lands in `cache`.
pub fn grid_search(base: &RunConfig, seeds: &[u64], problem: &PreparedProblem, cache: &RunCache) -> Result<GridResult> {
    grid_search_with(seeds, |step, seed| {
        let config = RunConfig { step_size: step, seed, ..base.clone() };
        Ok(cache.run(&config, problem)?.score())
    })
}

// ---- sweep ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub problem: ProblemSpec,
    pub model: ModelSpec,
    pub optimizers: Vec<OptimizerConfig>,
    pub base_batch: usize,
    /// Ladder levels to run; all five when absent.
    pub labels: Vec<BatchLabel>,
    pub reference_iters: usize,
    pub seeds: Vec<u64>,
    pub dropout_enabled: bool,
    pub micro_batch: usize,
    pub eval_every_epochs: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.optimizers.is_empty() {
            return Err(Error::schema("optimizers", "at least one optimizer required"));
        }
        for (i, o) in self.optimizers.iter().enumerate() {
            o.validate().map_err(|e| Error::schema(format!("optimizers[{i}]"), e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::schema("seeds", "at least one seed required"));
        }
        for (name, v) in [
            ("base_batch", self.base_batch),
            ("reference_iters", self.reference_iters),
            ("micro_batch", self.micro_batch),
            ("eval_every_epochs", self.eval_every_epochs),
        ] {
            if v == 0 {
                return Err(Error::schema(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Run configuration of one cell at a placeholder step size.
    pub fn cell_config(
        &self,
        optimizer: &OptimizerConfig,
        label: BatchLabel,
        ladder: &[(BatchLabel, usize)],
        budgets: &BTreeMap<BatchLabel, StoppingBudget>,
    ) -> Result<RunConfig> {
        let batch_size = ladder
            .iter()
            .find(|(l, _)| *l == label)
            .map(|&(_, b)| b)
            .ok_or_else(|| Error::schema("labels", format!("{label} not on the ladder")))?;
        let budget = budgets[&label];
        Ok(RunConfig {
            problem: self.problem.clone(),
            model: self.model.clone(),
            optimizer: optimizer.clone(),
            step_size: 0.0,
            batch_label: label,
            batch_size,
            epochs: budget.epochs,
            max_iterations: Some(budget.max_iterations),
            seed: self.seeds[0],
            dropout_enabled: self.dropout_enabled,
            micro_batch: self.micro_batch.min(batch_size),
            eval_every_epochs: self.eval_every_epochs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub optimizer: OptimizerId,
    pub label: BatchLabel,
    pub grid: std::result::Result<GridResult, String>,
    /// Final runs at the selected step size, one per seed.
    pub finals: Vec<RunRecord>,
}

impl CellResult {
    /// Median over seeds of the final training loss.
    pub fn median_final_loss(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.finals.iter().map(RunRecord::score).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub ladder: Vec<(BatchLabel, usize)>,
    pub budgets: BTreeMap<BatchLabel, StoppingBudget>,
    /// Keyed by (optimizer, label).
    pub cells: BTreeMap<(OptimizerId, BatchLabel), CellResult>,
}

impl SweepResult {
    pub fn cell(&self, optimizer: OptimizerId, label: BatchLabel) -> Option<&CellResult> {
        self.cells.get(&(optimizer, label))
    }

    /// Every final run, ordered by (optimizer, label, seed).
    pub fn records(&self) -> Vec<&RunRecord> {
        self.cells.values().flat_map(|c| c.finals.iter()).collect()
    }

    /// True when no cell found a finite step size.
    pub fn all_diverged(&self) -> bool {
        self.cells.values().all(|c| c.grid.is_err())
    }
}

/// Grid search per (optimizer, label) cell, then final runs at the selected
/// step size for every seed. Cells run on a pool of `threads` workers;
/// results are merged by key so scheduling does not affect them.
pub fn sweep(spec: &SweepSpec, threads: usize, cache: &RunCache) -> Result<SweepResult> {
    spec.validate()?;
    let problem = spec.problem.prepare()?;
    sweep_on(spec, &problem, threads, cache)
}

pub fn sweep_on(spec: &SweepSpec, problem: &PreparedProblem, threads: usize, cache: &RunCache) -> Result<SweepResult> {
    spec.validate()?;
    let n = problem.train.n_samples();
    let kept = trim_for_even_division(n, spec.micro_batch.min(n).max(1), true)?;
    let ladder = batch_size_ladder(spec.base_batch, kept)?;
    let budgets = stopping_iterations(&ladder, spec.reference_iters)?;
    let labels = if spec.labels.is_empty() { BatchLabel::ALL.to_vec() } else { spec.labels.clone() };

    let mut jobs = Vec::new();
    for opt in &spec.optimizers {
        for &label in &labels {
            jobs.push((opt.clone(), label, spec.cell_config(opt, label, &ladder, &budgets)?));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        jobs.par_iter()
            .map(|(opt, label, base)| run_cell(opt, *label, base, &spec.seeds, problem, cache))
            .collect()
    });
    let cells = results.into_iter().map(|c| ((c.optimizer, c.label), c)).collect();
    Ok(SweepResult { ladder, budgets, cells })
}

fn run_cell(
    opt: &OptimizerConfig,
    label: BatchLabel,
    base: &RunConfig,
    seeds: &[u64],
    problem: &PreparedProblem,
    cache: &RunCache,
) -> CellResult {
    let grid = grid_search(base, seeds, problem, cache);
    let finals = match &grid {
        Ok(g) => seeds
            .iter()
            .filter_map(|&seed| cache.run(&RunConfig { step_size: g.selected, seed, ..base.clone() }, problem).ok())
            .collect(),
        Err(_) => Vec::new(),
    };
    CellResult { optimizer: opt.id, label, grid: grid.map_err(|e| e.to_string()), finals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticSpec;

    #[test]
    fn ladders() {
        let l = batch_size_ladder(8, 4096).unwrap();
        assert_eq!(l.iter().map(|x| x.1).collect::<Vec<_>>(), vec![8, 32, 128, 512, 4096]);
        let l = batch_size_ladder(16, 26_520).unwrap();
        assert_eq!(l.iter().map(|x| x.1).collect::<Vec<_>>(), vec![16, 64, 256, 1024, 26_520]);
        assert!(matches!(batch_size_ladder(16, 500), Err(Error::LadderTooTall { .. })));
    }

    #[test]
    fn budgets_floor_small_batches_at_one_epoch() {
        // 815 iterations per epoch at S against 320 for Full
        let ladder = batch_size_ladder(20, 16_300).unwrap();
        let b = stopping_iterations(&ladder, 320).unwrap();
        assert_eq!(b[&BatchLabel::S], StoppingBudget { epochs: 1, max_iterations: 815, flagged: true });
        assert_eq!(b[&BatchLabel::Full], StoppingBudget { epochs: 320, max_iterations: 320, flagged: false });
        for budget in b.values() {
            assert!(budget.epochs >= 1 && budget.max_iterations >= 320);
        }
    }

    #[test]
    fn exact_budgets_are_equal() {
        let ladder = batch_size_ladder(1, 128).unwrap();
        let b = stopping_iterations(&ladder, 128).unwrap();
        assert!(b.values().all(|x| x.max_iterations == 128 && !x.flagged));
    }

    #[test]
    fn half_exponent_steps() {
        assert_eq!(step_from_half_exponent(-4), 1e-2);
        assert_eq!(step_from_half_exponent(0), 1.0);
        assert!((step_from_half_exponent(-5) - 10f64.powf(-2.5)).abs() < 1e-18);
    }

    #[test]
    fn grid_examples() {
        let finals = |step: f64| match step {
            s if (s - 1e-3).abs() < 1e-12 => 2.0,
            s if (s - 1e-2).abs() < 1e-12 => 1.5,
            s if (s - 1e-1).abs() < 1e-12 => 1.8,
            _ => 10.0,
        };
        let g = grid_search_with(&[0], |s, _| Ok(finals(s))).unwrap();
        assert_eq!(g.selected, 1e-2);
        assert!(g.candidate(-5).is_some() && g.candidate(-3).is_some());
        assert_eq!(g.refinement_rounds, 1);

        let g = grid_search_with(&[0], |s, _| Ok(-s.ln())).unwrap();
        assert!(g.candidate(2).is_some());

        let g = grid_search_with(&[1, 2], |s, seed| {
            Ok(match (s == 1e-3, seed) {
                (true, 1) => 2.0,
                (true, _) => 1.4,
                (false, 1) => 1.6,
                (false, _) => 1.7,
            })
        })
        .unwrap();
        assert_ne!(g.selected, 1e-3);
        assert!(matches!(grid_search_with(&[0], |_, _| Ok(f64::NAN)), Err(Error::AllDiverged)));
    }

    fn probe(step: f64, label: BatchLabel, batch: usize) -> RunConfig {
        RunConfig {
            problem: ProblemSpec::Quadratic { n: 16, dim: 3, spread: 0.0, data_seed: 1 },
            model: ModelSpec::Quadratic(QuadraticSpec { curvatures: vec![1.0; 3], init_scale: 1.0 }),
            optimizer: OptimizerConfig::new(OptimizerId::Sgd),
            step_size: step,
            batch_label: label,
            batch_size: batch,
            epochs: 5,
            max_iterations: None,
            seed: 3,
            dropout_enabled: false,
            micro_batch: 4,
            eval_every_epochs: 1,
        }
    }

    #[test]
    fn zero_step_keeps_loss_constant() {
        let r = run_training(&probe(0.0, BatchLabel::Full, 16)).unwrap();
        let l0 = r.iterations[0].train_loss;
        assert!(r.iterations.iter().all(|l| (l.train_loss - l0).abs() <= 1e-12));
    }

    #[test]
    fn unit_step_reaches_minimizer() {
        let r = run_training(&RunConfig { epochs: 1, ..probe(1.0, BatchLabel::Full, 16) }).unwrap();
        assert!(r.final_train_loss.abs() < 1e-24, "{}", r.final_train_loss);
    }

    #[test]
    fn divergence_is_recorded() {
        let mut c = probe(1e200, BatchLabel::Full, 16);
        c.epochs = 20;
        let r = run_training(&c).unwrap();
        assert!(r.diverged);
        assert_eq!(r.score(), f64::INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        let back: RunRecord = serde_json::from_str(&json).unwrap();
        assert!(back.diverged && back.final_train_loss.is_infinite());
    }

    #[test]
    fn runs_are_deterministic() {
        let c = probe(0.1, BatchLabel::S, 2);
        let a = run_training(&c).unwrap();
        let b = run_training(&c).unwrap();
        let strip = |r: &RunRecord| r.iterations.iter().map(|l| l.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.final_train_loss.to_bits(), b.final_train_loss.to_bits());
    }
}

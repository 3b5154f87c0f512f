//! JSON configuration files.
//!
//! A document's top-level `"kind"` selects its schema: `"run"` (the
//! default), `"grid"`, `"sweep"`, `"noise"` or `"plot"`. Unknown keys are
//! errors reported with their path. Omitted optimizer hyperparameters take
//! the library defaults; explicit values are never replaced.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{BatchLabel, ProblemSpec, RunConfig, SweepSpec};
use crate::models::ModelSpec;
use crate::optim::{OptimizerConfig, OptimizerId};
use crate::plot::PlotSpec;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Optimizer hyperparameters as written in a file; `None` takes the default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerOverrides {
    pub beta: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub bias_correction: Option<bool>,
    pub epsilon_inside_sqrt: Option<bool>,
}

impl OptimizerOverrides {
    pub fn resolve(&self, id: OptimizerId) -> OptimizerConfig {
        let d = OptimizerConfig::new(id);
        OptimizerConfig {
            id,
            beta: self.beta.unwrap_or(d.beta),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            bias_correction: self.bias_correction.unwrap_or(d.bias_correction),
            epsilon_inside_sqrt: self.epsilon_inside_sqrt.unwrap_or(d.epsilon_inside_sqrt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    problem: ProblemSpec,
    model: ModelSpec,
    optimizer: OptimizerId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_correction: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon_inside_sqrt: Option<bool>,
    #[serde(default)]
    step_size: Option<f64>,
    batch_label: BatchLabel,
    batch_size: usize,
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    max_iterations: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    dropout_enabled: Option<bool>,
    #[serde(default)]
    micro_batch: Option<usize>,
    #[serde(default)]
    eval_every_epochs: Option<usize>,
}

impl RawRun {
    fn resolve(self, needs_step: bool) -> Result<(RunConfig, Vec<u64>)> {
        let step_size = match (self.step_size, needs_step) {
            (Some(s), _) => s,
            (None, false) => 0.0,
            (None, true) => return Err(Error::schema("step_size", "missing field `step_size`")),
        };
        let optimizer = self.hyper().resolve(self.optimizer);
        let config = RunConfig {
            problem: self.problem,
            model: self.model,
            optimizer,
            step_size,
            batch_label: self.batch_label,
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or(1),
            max_iterations: self.max_iterations,
            seed: self.seed.unwrap_or(0),
            dropout_enabled: self.dropout_enabled.unwrap_or(true),
            micro_batch: self.micro_batch.unwrap_or(self.batch_size),
            eval_every_epochs: self.eval_every_epochs.unwrap_or(1),
        };
        config.validate()?;
        let seeds = self.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
        Ok((config, seeds))
    }

    fn from_config(c: &RunConfig, seeds: Option<Vec<u64>>) -> Self {
        Self {
            problem: c.problem.clone(),
            model: c.model.clone(),
            optimizer: c.optimizer.id,
            beta: Some(c.optimizer.beta),
            beta1: Some(c.optimizer.beta1),
            beta2: Some(c.optimizer.beta2),
            epsilon: Some(c.optimizer.epsilon),
            bias_correction: Some(c.optimizer.bias_correction),
            epsilon_inside_sqrt: Some(c.optimizer.epsilon_inside_sqrt),
            step_size: Some(c.step_size),
            batch_label: c.batch_label,
            batch_size: c.batch_size,
            epochs: Some(c.epochs),
            max_iterations: c.max_iterations,
            seed: Some(c.seed),
            seeds,
            dropout_enabled: Some(c.dropout_enabled),
            micro_batch: Some(c.micro_batch),
            eval_every_epochs: Some(c.eval_every_epochs),
        }
    }
}

macro_rules! hyper_accessor {
    ($t:ty) => {
        impl $t {
            fn hyper(&self) -> OptimizerOverrides {
                OptimizerOverrides {
                    beta: self.beta,
                    beta1: self.beta1,
                    beta2: self.beta2,
                    epsilon: self.epsilon,
                    bias_correction: self.bias_correction,
                    epsilon_inside_sqrt: self.epsilon_inside_sqrt,
                }
            }
        }
    };
}

hyper_accessor!(RawRun);
hyper_accessor!(RawSweep);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    problem: ProblemSpec,
    model: ModelSpec,
    #[serde(default)]
    optimizers: Option<Vec<OptimizerId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_correction: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon_inside_sqrt: Option<bool>,
    base_batch: usize,
    #[serde(default)]
    labels: Option<Vec<BatchLabel>>,
    reference_iters: usize,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    dropout_enabled: Option<bool>,
    #[serde(default)]
    micro_batch: Option<usize>,
    #[serde(default)]
    eval_every_epochs: Option<usize>,
}

/// Noise analysis at initialization, one histogram per batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub problem: ProblemSpec,
    pub model: ModelSpec,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_noise_micro_batch")]
    pub micro_batch: usize,
    /// Seeds the parameter initialization and the draws.
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    crate::noise::DEFAULT_DRAWS
}

fn default_noise_micro_batch() -> usize {
    32
}

/// A grid search: the base run plus the seeds to take the max over.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigDoc {
    Run(RunConfig),
    Grid(GridConfig),
    Sweep(SweepSpec),
    Noise(NoiseConfig),
    Plot(PlotSpec),
}

impl ConfigDoc {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigDoc::Run(_) => "run",
            ConfigDoc::Grid(_) => "grid",
            ConfigDoc::Sweep(_) => "sweep",
            ConfigDoc::Noise(_) => "noise",
            ConfigDoc::Plot(_) => "plot",
        }
    }
}

fn parse_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })
}

pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::schema(".", format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::schema(".", "top level must be an object"))?;
    let kind = match obj.remove("kind") {
        None => "run".to_string(),
        Some(serde_json::Value::String(s)) => s,
        Some(_) => return Err(Error::schema("kind", "must be a string")),
    };
    match kind.as_str() {
        "run" => {
            let raw: RawRun = parse_value(value)?;
            if raw.seeds.is_some() {
                return Err(Error::schema("seeds", "unknown field `seeds` for a run; use `seed`"));
            }
            Ok(ConfigDoc::Run(raw.resolve(true)?.0))
        }
        "grid" => {
            let raw: RawRun = parse_value(value)?;
            let (base, seeds) = raw.resolve(false)?;
            if seeds.is_empty() {
                return Err(Error::schema("seeds", "at least one seed required"));
            }
            Ok(ConfigDoc::Grid(GridConfig { base, seeds }))
        }
        "sweep" => {
            let raw: RawSweep = parse_value(value)?;
            let hyper = raw.hyper();
            let ids = raw.optimizers.unwrap_or_else(|| OptimizerId::ALL.to_vec());
            let spec = SweepSpec {
                problem: raw.problem,
                model: raw.model,
                optimizers: ids.into_iter().map(|id| hyper.resolve(id)).collect(),
                base_batch: raw.base_batch,
                labels: raw.labels.unwrap_or_else(|| BatchLabel::ALL.to_vec()),
                reference_iters: raw.reference_iters,
                seeds: raw.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
                dropout_enabled: raw.dropout_enabled.unwrap_or(true),
                micro_batch: raw.micro_batch.unwrap_or(raw.base_batch),
                eval_every_epochs: raw.eval_every_epochs.unwrap_or(1),
            };
            spec.validate()?;
            Ok(ConfigDoc::Sweep(spec))
        }
        "noise" => {
            let c: NoiseConfig = parse_value(value)?;
            c.model.validate()?;
            if c.batch_sizes.is_empty() {
                return Err(Error::schema("batch_sizes", "at least one batch size required"));
            }
            Ok(ConfigDoc::Noise(c))
        }
        "plot" => Ok(ConfigDoc::Plot(parse_value(value)?)),
        other => Err(Error::schema("kind", format!("unknown config kind {other:?}"))),
    }
}

pub fn read_config(path: &std::path::Path) -> Result<ConfigDoc> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Serializes with every default spelled out; `parse_config` returns the
/// same document.
pub fn to_config_string(doc: &ConfigDoc) -> Result<String> {
    let mut value = match doc {
        ConfigDoc::Run(c) => serde_json::to_value(RawRun::from_config(c, None))?,
        ConfigDoc::Grid(g) => serde_json::to_value(RawRun::from_config(&g.base, Some(g.seeds.clone())))?,
        ConfigDoc::Sweep(s) => {
            let hyper = OptimizerOverrides::shared(s.optimizers.first());
            if s.optimizers.iter().any(|o| *o != hyper.resolve(o.id)) {
                return Err(Error::schema("optimizers", "per-optimizer hyperparameters cannot be expressed in a sweep file"));
            }
            serde_json::to_value(RawSweep {
                problem: s.problem.clone(),
                model: s.model.clone(),
                optimizers: Some(s.optimizers.iter().map(|o| o.id).collect()),
                beta: None,
                beta1: None,
                beta2: hyper.beta2,
                epsilon: hyper.epsilon,
                bias_correction: hyper.bias_correction,
                epsilon_inside_sqrt: hyper.epsilon_inside_sqrt,
                base_batch: s.base_batch,
                labels: Some(s.labels.clone()),
                reference_iters: s.reference_iters,
                seeds: Some(s.seeds.clone()),
                dropout_enabled: Some(s.dropout_enabled),
                micro_batch: Some(s.micro_batch),
                eval_every_epochs: Some(s.eval_every_epochs),
            })?
        }
        ConfigDoc::Noise(c) => serde_json::to_value(c)?,
        ConfigDoc::Plot(p) => serde_json::to_value(p)?,
    };
    if let Some(obj) = value.as_object_mut() {
        obj.insert("kind".into(), serde_json::Value::String(doc.kind().into()));
    }
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

impl OptimizerOverrides {
    /// The momentum-independent settings shared by a sweep's optimizers.
    fn shared(first: Option<&OptimizerConfig>) -> Self {
        match first {
            Some(c) => Self {
                beta2: Some(c.beta2),
                epsilon: Some(c.epsilon),
                bias_correction: Some(c.bias_correction),
                epsilon_inside_sqrt: Some(c.epsilon_inside_sqrt),
                ..Self::default()
            },
            None => Self::default(),
        }
    }
}

/// Where a subcommand writes, relative to `--out`.
pub fn out_path(dir: &std::path::Path, name: &str) -> PathBuf {
    dir.join(name)
}

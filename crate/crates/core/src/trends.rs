//! Ordinal comparisons of optimizers on the character-level language model:
//! full-batch ordering, batch-size scaling, and sign descent at the two ends
//! of the ladder, each with and without dropout where it applies.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::harness::{sweep_on, BatchLabel, PreparedProblem, ProblemSpec, RunCache, RunRecord, SweepSpec};
use crate::models::{ModelSpec, TransformerLmSpec};
use crate::optim::{OptimizerConfig, OptimizerId};

#[derive(Clone, Debug, Serialize)]
pub struct TrendStudy {
    pub problem: ProblemSpec,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
    pub base_batch: usize,
    pub reference_iters: usize,
    pub seeds: Vec<u64>,
    pub micro_batch: usize,
    pub threads: usize,
}

impl TrendStudy {
    /// Two-layer, 64-wide model on `bytes` of generated text cut into
    /// windows of 32 characters.
    pub fn char_lm(bytes: usize, base_batch: usize, reference_iters: usize) -> Self {
        Self {
            problem: ProblemSpec::CharLm {
                corpus: None,
                synth_bytes: bytes,
                max_bytes: None,
                seq_len: 32,
                data_seed: 0,
                holdout_fraction: 0.0,
            },
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            dropout_p: 0.1,
            base_batch,
            reference_iters,
            seeds: vec![0, 1, 2],
            micro_batch: 8,
            threads: 1,
        }
    }

    fn model(&self, vocab: usize, seq_len: usize) -> ModelSpec {
        ModelSpec::Transformer(TransformerLmSpec {
            vocab_size: vocab,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            seq_len,
            dropout_p: self.dropout_p,
        })
    }
}

/// Median-over-seeds final training loss per cell.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrendTable {
    pub dropout: BTreeMap<String, f64>,
    pub no_dropout: BTreeMap<String, f64>,
    pub selected_steps: BTreeMap<String, f64>,
}

fn key(opt: OptimizerId, label: BatchLabel) -> String {
    format!("{opt} {label}")
}

impl TrendTable {
    fn get(&self, dropout: bool, opt: OptimizerId, label: BatchLabel) -> f64 {
        let t = if dropout { &self.dropout } else { &self.no_dropout };
        t.get(&key(opt, label)).copied().unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrendCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for TrendCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub struct TrendReport {
    pub table: TrendTable,
    pub checks: Vec<TrendCheck>,
    pub records: Vec<RunRecord>,
    pub trained_runs: usize,
}

const LADDER_OPTS: [OptimizerId; 2] = [OptimizerId::AdamMomentum, OptimizerId::SgdMomentum];
const FULL_OPTS: [OptimizerId; 4] = [
    OptimizerId::AdamMomentum,
    OptimizerId::SignMomentum,
    OptimizerId::NormGdMomentum,
    OptimizerId::SgdMomentum,
];

pub fn run_trend_study(study: &TrendStudy, cache: &RunCache) -> Result<TrendReport> {
    let problem: PreparedProblem = study.problem.prepare()?;
    let vocab = problem.vocab.as_ref().map_or(0, |v| v.len());
    let seq_len = match &study.problem {
        ProblemSpec::CharLm { seq_len, .. } => *seq_len,
        _ => 32,
    };
    let spec = |opts: &[OptimizerId], labels: &[BatchLabel], dropout: bool| SweepSpec {
        problem: study.problem.clone(),
        model: study.model(vocab, seq_len),
        optimizers: opts.iter().map(|&id| OptimizerConfig::new(id)).collect(),
        base_batch: study.base_batch,
        labels: labels.to_vec(),
        reference_iters: study.reference_iters,
        seeds: study.seeds.clone(),
        dropout_enabled: dropout,
        micro_batch: study.micro_batch,
        // one evaluation per run, at the stopping point
        eval_every_epochs: usize::MAX,
    };
    let plans = [
        (spec(&LADDER_OPTS, &BatchLabel::ALL, true), true),
        (spec(&[OptimizerId::SignMomentum], &[BatchLabel::S, BatchLabel::Full], true), true),
        (spec(&[OptimizerId::NormGdMomentum], &[BatchLabel::Full], true), true),
        (spec(&FULL_OPTS, &[BatchLabel::Full], false), false),
    ];
    let mut table = TrendTable::default();
    let mut records = Vec::new();
    for (s, dropout) in &plans {
        let result = sweep_on(s, &problem, study.threads, cache)?;
        for c in result.cells.values() {
            let k = key(c.optimizer, c.label);
            let median = c.median_final_loss().unwrap_or(f64::INFINITY);
            if *dropout {
                table.dropout.insert(k.clone(), median);
            } else {
                table.no_dropout.insert(k.clone(), median);
            }
            if let Ok(g) = &c.grid {
                let suffix = if *dropout { "" } else { " no-dropout" };
                table.selected_steps.insert(format!("{k}{suffix}"), g.selected);
            }
            records.extend(c.finals.iter().cloned());
        }
    }
    let checks = evaluate(&table);
    Ok(TrendReport { table, checks, records, trained_runs: cache.trained_runs() })
}

fn full_ordering(t: &TrendTable, dropout: bool, name: &'static str) -> TrendCheck {
    use OptimizerId::*;
    let f = |o| t.get(dropout, o, BatchLabel::Full);
    let (adam, sign, norm, gd) = (f(AdamMomentum), f(SignMomentum), f(NormGdMomentum), f(SgdMomentum));
    let closed = (gd - sign) / (gd - adam);
    let passed = adam <= sign && sign < norm && norm < gd && gd > adam && closed >= 0.5;
    TrendCheck {
        name,
        passed,
        detail: format!(
            "adam+m {adam:.4} <= sign+m {sign:.4} < norm-gd+m {norm:.4} < sgd+m {gd:.4}; sign+m closes {:.0}% of the gap",
            100.0 * closed
        ),
    }
}

/// Applies the ordinal criteria to the median table.
pub fn evaluate(t: &TrendTable) -> Vec<TrendCheck> {
    use OptimizerId::*;
    let mut checks = vec![full_ordering(t, true, "full-batch ordering")];

    let adam: Vec<f64> = BatchLabel::ALL.iter().map(|&l| t.get(true, AdamMomentum, l)).collect();
    let gd: Vec<f64> = BatchLabel::ALL.iter().map(|&l| t.get(true, SgdMomentum, l)).collect();
    let inversions = adam.windows(2).filter(|w| w[1] > w[0]).count();
    let adam_gain = adam[0] - adam[4];
    let gd_gain = gd[0] - gd[4];
    checks.push(TrendCheck {
        name: "batch-size scaling",
        passed: inversions <= 1 && adam_gain > 0.0 && gd_gain < 0.5 * adam_gain,
        detail: format!(
            "adam+m S..Full {:?} ({inversions} inversions, gain {adam_gain:.4}); sgd+m S..Full {:?} (gain {gd_gain:.4})",
            adam.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            gd.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    });

    let (sign_s, gd_s) = (t.get(true, SignMomentum, BatchLabel::S), t.get(true, SgdMomentum, BatchLabel::S));
    let (sign_f, norm_f) = (t.get(true, SignMomentum, BatchLabel::Full), t.get(true, NormGdMomentum, BatchLabel::Full));
    checks.push(TrendCheck {
        name: "sign descent across batch sizes",
        passed: sign_s >= gd_s && sign_f < norm_f,
        detail: format!("S: sign+m {sign_s:.4} >= sgd+m {gd_s:.4}; Full: sign+m {sign_f:.4} < norm-gd+m {norm_f:.4}"),
    });

    checks.push(full_ordering(t, false, "full-batch ordering without dropout"));
    checks
}

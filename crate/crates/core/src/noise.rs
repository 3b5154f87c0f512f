//! Stochastic-gradient error analysis at a fixed parameter point.
//!
//! Draw minibatches, measure `‖g̃ − g‖₂` against the full gradient, fit a
//! Gaussian to the norms, and summarise the tail with QQ points, excess
//! kurtosis and a quantile ratio.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{trim_for_even_division, Dataset};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelSpec, ParamVector};
use crate::rng::{RngStream, StreamId};

/// Default number of minibatch draws per histogram.
pub const DEFAULT_DRAWS: usize = 1000;
pub const MIN_DRAWS: usize = 30;
pub const MIN_TAIL_SAMPLES: usize = 100;

/// Sample-mean loss and gradient over a list of sample indices, accumulated
/// over micro-batches in eval mode.
pub fn accumulated_gradient(
    model: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    indices: &[usize],
    micro_batch: usize,
) -> Result<(f64, Vec<f64>)> {
    let unused = RngStream::new(0, StreamId::Dropout);
    model.accumulate(params, dataset, indices, micro_batch, Mode::Eval, &unused)
}

/// Full-dataset gradient over the samples kept after trimming to a multiple
/// of `micro_batch`. Dropout must be off.
pub fn full_gradient(
    model: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    micro_batch: usize,
    mode: Mode,
) -> Result<Vec<f64>> {
    if mode == Mode::Train {
        return Err(Error::DropoutActive);
    }
    let kept = trim_for_even_division(dataset.n_samples(), micro_batch, true)?;
    let indices: Vec<usize> = (0..kept).collect();
    Ok(accumulated_gradient(model, params, dataset, &indices, micro_batch)?.1)
}

/// Gaussian fit and tail summary of nonnegative error norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub n: usize,
    pub fitted_mu: f64,
    pub fitted_sigma: f64,
    pub excess_kurtosis: Option<f64>,
    pub tail_ratio_99_90: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NoiseSample {
    values: Vec<f64>,
    batch_size: usize,
    at_params: Arc<ParamVector>,
    stats: NoiseStats,
}

impl NoiseSample {
    pub fn new(values: Vec<f64>, batch_size: usize, at_params: Arc<ParamVector>) -> Result<Self> {
        let stats = summarize(&values)?;
        Ok(Self { values, batch_size, at_params, stats })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        self.stats = summarize(&values)?;
        self.values = values;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn at_params(&self) -> &ParamVector {
        &self.at_params
    }

    pub fn stats(&self) -> &NoiseStats {
        &self.stats
    }

    /// `draw_index,error_norm` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(["draw_index", "error_norm"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            batch_size: usize,
            #[serde(flatten)]
            stats: &'a NoiseStats,
        }
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &Sidecar { batch_size: self.batch_size, stats: &self.stats })?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn summarize(values: &[f64]) -> Result<NoiseStats> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InsufficientSamples("error norms must be finite and nonnegative".into()));
    }
    let (fitted_mu, fitted_sigma) = fit_gaussian(values)?;
    let tail = tail_stats(values).ok();
    Ok(NoiseStats {
        n: values.len(),
        fitted_mu,
        fitted_sigma,
        excess_kurtosis: tail.map(|t| t.excess_kurtosis),
        tail_ratio_99_90: tail.map(|t| t.tail_ratio_99_90),
    })
}

/// Draws `n_draws` minibatches of `batch_size` distinct samples from the
/// trimmed dataset and records `‖g̃ − g‖₂` for each. Draw `i` is seeded by
/// `(seed, i)` alone, so the result does not depend on scheduling.
pub fn grad_error_samples(
    model: &ModelSpec,
    params: Arc<ParamVector>,
    dataset: &Dataset,
    batch_size: usize,
    n_draws: usize,
    micro_batch: usize,
    seed: u64,
) -> Result<NoiseSample> {
    if n_draws < MIN_DRAWS {
        return Err(Error::InsufficientSamples(format!("{n_draws} draws, need at least {MIN_DRAWS}")));
    }
    let kept = trim_for_even_division(dataset.n_samples(), micro_batch, true)?;
    if batch_size == 0 || batch_size > kept {
        return Err(Error::BatchTooLarge { batch_size, available: kept });
    }
    let all: Vec<usize> = (0..kept).collect();
    let (_, full) = accumulated_gradient(model, &params, dataset, &all, micro_batch)?;
    let root = RngStream::new(seed, StreamId::Noise);
    let values = (0..n_draws)
        .into_par_iter()
        .map(|draw| -> Result<f64> {
            let mut rng = root.substream(draw as u64);
            let mut idx = rng.sample_indices(kept, batch_size);
            if batch_size == kept {
                idx.sort_unstable();
            }
            let (_, g) = accumulated_gradient(model, &params, dataset, &idx, micro_batch)?;
            Ok(g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    NoiseSample::new(values, batch_size, params)
}

/// Sample mean and unbiased standard deviation.
pub fn fit_gaussian(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples(format!("{} values, need at least 2", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Newton step on the CDF.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - (normal_cdf(x) - p) / density
}

/// `(theoretical, empirical)` pairs: sorted values against
/// `mu + sigma·Φ⁻¹((i − 0.5)/n)`.
pub fn qq_points(values: &[f64], mu: f64, sigma: f64) -> Result<Vec<(f64, f64)>> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples(format!("{} values, need at least 2", values.len())));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::DegenerateFit);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (mu + sigma * normal_quantile((i as f64 + 0.5) / n), v))
        .collect())
}

/// QQ points against the sample's own Gaussian fit.
pub fn qq_against_fit(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (mu, sigma) = fit_gaussian(values)?;
    qq_points(values, mu, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailStats {
    pub excess_kurtosis: f64,
    pub tail_ratio_99_90: f64,
}

/// Linear-interpolation quantile of sorted data (`h = (n − 1)·q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Excess kurtosis `m₄/m₂² − 3` from biased moments, and
/// `(q₀.₉₉ − median)/(q₀.₉₀ − median)`.
pub fn tail_stats(values: &[f64]) -> Result<TailStats> {
    if values.len() < MIN_TAIL_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "{} values, need at least {MIN_TAIL_SAMPLES}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Err(Error::InsufficientSamples("zero variance".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let q90 = quantile_sorted(&sorted, 0.9);
    let q99 = quantile_sorted(&sorted, 0.99);
    if q90 == median {
        return Err(Error::InsufficientSamples("90th percentile equals the median".into()));
    }
    Ok(TailStats {
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        tail_ratio_99_90: (q99 - median) / (q90 - median),
    })
}

/// Seeded standard-normal and Student-t fixtures for calibrating the analyzer.
pub fn gaussian_fixture(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, StreamId::Fixture);
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

pub fn student_t_fixture(n: usize, df: f64, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, StreamId::Fixture);
    (0..n).map(|_| rng.student_t(df)).collect()
}

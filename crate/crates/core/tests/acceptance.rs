//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 are exact and fail the process when they fail. Criteria 7
//! and 8 are statistical; their lines are always printed but only fail the
//! process when `OPTLAB_ACCEPTANCE_STRICT=1`. Set
//! `OPTLAB_ACCEPTANCE_SKIP_TRENDS=1` to skip the long criterion 8.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use optlab::data::{synth_classification, synth_corpus, tokenize_corpus, Batch};
use optlab::harness::{
    grid_search_with, run_training, sweep, BatchLabel, ProblemSpec, RunCache, RunConfig, SweepSpec,
};
use optlab::models::{Activation, MlpSpec, ModelSpec, Mode, TransformerLmSpec};
use optlab::noise::{self, full_gradient};
use optlab::optim::{l2_norm, OptimizerConfig, OptimizerId};
use optlab::results::{write_results, WriteOptions};
use optlab::rng::{RngStream, StreamId};
use optlab::trends::{run_trend_study, TrendStudy};

const IDENTITY_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const GRAD_DRAWS: u64 = 5;
const ACCUMULATION_TOL: f64 = 1e-10;
const GEOMETRY_TOL: f64 = 1e-12;
const QQ_DRAWS: usize = 10_000;
const QQ_MAX_DEVIATION: f64 = 0.08;
const TAIL_DRAWS: usize = 100_000;

// criterion 8 scale
const TREND_BYTES: usize = 3073;
const TREND_BASE_BATCH: usize = 1;
const TREND_REFERENCE_ITERS: usize = 48;

struct Line {
    id: &'static str,
    name: &'static str,
    passed: bool,
    exact: bool,
    detail: String,
    secs: f64,
}

fn timed(id: &'static str, name: &'static str, exact: bool, f: impl FnOnce() -> (bool, String)) -> Line {
    let t = Instant::now();
    let (passed, detail) = f();
    let line = Line { id, name, passed, exact, detail, secs: t.elapsed().as_secs_f64() };
    println!(
        "{} criterion {} ({}): {} [{:.1}s]",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail,
        line.secs
    );
    line
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&d) / l2_norm(a).max(f64::MIN_POSITIVE)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 1 ----

fn quadratic_trajectory(config: &OptimizerConfig, alpha: f64, curv: &[f64], centre: &[f64], x0: &[f64]) -> Vec<Vec<f64>> {
    let mut opt = config.build(alpha, x0.len());
    let mut x = x0.to_vec();
    let mut out = Vec::new();
    for _ in 0..20 {
        let g: Vec<f64> = x.iter().zip(curv).zip(centre).map(|((xi, h), c)| h * (xi - c)).collect();
        opt.step(&mut x, &g).expect("step");
        out.push(x.clone());
    }
    out
}

fn reduction_identity() -> (bool, String) {
    let mut rng = RngStream::new(11, StreamId::Fixture);
    let dim = 16;
    let curv: Vec<f64> = (0..dim).map(|_| rng.uniform(0.1, 10.0)).collect();
    let centre: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
    let x0: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 3.0)).collect();
    let alpha = 0.05;

    let adam = OptimizerConfig {
        beta1: 0.0,
        beta2: 0.0,
        epsilon: 0.0,
        bias_correction: false,
        ..OptimizerConfig::new(OptimizerId::Adam)
    };
    let rms = OptimizerConfig { beta2: 0.0, epsilon: 0.0, ..OptimizerConfig::new(OptimizerId::Rmsprop) };
    let sign = OptimizerConfig { beta: 0.0, ..OptimizerConfig::new(OptimizerId::Sign) };
    let ta = quadratic_trajectory(&adam, alpha, &curv, &centre, &x0);
    let tr = quadratic_trajectory(&rms, alpha, &curv, &centre, &x0);
    let ts = quadratic_trajectory(&sign, alpha, &curv, &centre, &x0);
    let mut worst: f64 = 0.0;
    for ((a, r), s) in ta.iter().zip(&tr).zip(&ts) {
        worst = worst.max(max_abs_diff(a, s)).max(max_abs_diff(r, s));
    }
    (worst <= IDENTITY_TOL, format!("max coordinate deviation {worst:e} over 20 steps (tol {IDENTITY_TOL:e})"))
}

// ---- 2 ----

fn small_mlp() -> ModelSpec {
    ModelSpec::Mlp(MlpSpec { input_dim: 5, hidden_dims: vec![7, 6], num_classes: 3, activation: Activation::Tanh })
}

fn small_lm() -> TransformerLmSpec {
    TransformerLmSpec {
        vocab_size: 11,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 12,
        seq_len: 6,
        dropout_p: 0.1,
    }
}

fn random_tokens(spec: &TransformerLmSpec, n: usize, rng: &mut RngStream) -> Batch {
    let total = n * spec.seq_len;
    let ids: Vec<usize> = (0..=total).map(|_| rng.uniform(0.0, spec.vocab_size as f64) as usize % spec.vocab_size).collect();
    Batch::Tokens { inputs: ids[..total].to_vec(), targets: ids[1..].to_vec(), seq_len: spec.seq_len }
}

fn gradient_correctness() -> (bool, String) {
    let mut worst_mlp: f64 = 0.0;
    let mut worst_lm: f64 = 0.0;
    let mut passed = true;
    for draw in 0..GRAD_DRAWS {
        let mlp = small_mlp();
        let params = mlp.init(&mut RngStream::new(draw, StreamId::Init)).unwrap();
        let mut rng = RngStream::new(draw, StreamId::Fixture);
        let data = synth_classification(9, 5, 3, 2.0, &mut rng).unwrap();
        let idx: Vec<usize> = (0..9).collect();
        let r = mlp.check_gradient(&params, &data.batch(&idx), None, GRAD_TOL).unwrap();
        worst_mlp = worst_mlp.max(r.worst_rel_error);
        passed &= r.passed;

        let lm_spec = small_lm();
        let lm = ModelSpec::Transformer(lm_spec.clone());
        let params = lm.init(&mut RngStream::new(draw, StreamId::Init)).unwrap();
        let batch = random_tokens(&lm_spec, 2, &mut rng);
        let r = lm.check_gradient(&params, &batch, None, GRAD_TOL).unwrap();
        worst_lm = worst_lm.max(r.worst_rel_error);
        passed &= r.passed;
    }
    (
        passed,
        format!("{GRAD_DRAWS} draws each; worst relative error MLP {worst_mlp:.2e}, transformer {worst_lm:.2e} (tol {GRAD_TOL:e})"),
    )
}

// ---- 3 ----

fn accumulation_equivalence() -> (bool, String) {
    let mut rng = RngStream::new(3, StreamId::Fixture);
    let mlp = small_mlp();
    let mlp_data = synth_classification(64, 5, 3, 2.0, &mut rng).unwrap();
    let lm_spec = TransformerLmSpec { seq_len: 8, ..small_lm() };
    let text = synth_corpus(16 * 8 + 1, &mut rng);
    let (lm_data, vocab) = tokenize_corpus(&text, 8).unwrap();
    let lm = ModelSpec::Transformer(TransformerLmSpec { vocab_size: vocab.len(), ..lm_spec });

    let mut details = Vec::new();
    let mut passed = true;
    for (name, model, data) in [("MLP", &mlp, &mlp_data), ("transformer", &lm, &lm_data)] {
        let params = model.init(&mut RngStream::new(0, StreamId::Init)).unwrap();
        let kept = data.n_samples();
        let reference = full_gradient(model, &params, data, kept, Mode::Eval).unwrap();
        let mut worst: f64 = 0.0;
        for micro in [kept / 2, kept / 4] {
            let g = full_gradient(model, &params, data, micro, Mode::Eval).unwrap();
            worst = worst.max(rel_diff(&reference, &g));
        }
        passed &= worst <= ACCUMULATION_TOL;
        details.push(format!("{name} kept {kept} worst {worst:.1e}"));
    }
    (passed, format!("{} (tol {ACCUMULATION_TOL:e})", details.join(", ")))
}

// ---- 4 ----

fn update_geometry() -> (bool, String) {
    let dim = 12;
    let alpha = 0.3;
    let mut rng = RngStream::new(4, StreamId::Fixture);
    let grads: Vec<Vec<f64>> = (0..20)
        .map(|t| {
            (0..dim)
                .map(|i| if (i + t) % 5 == 0 { 0.0 } else { rng.normal(0.0, 2.0) })
                .collect()
        })
        .collect();

    let norm_cfg = OptimizerConfig { beta: 0.0, ..OptimizerConfig::new(OptimizerId::NormGd) };
    let mut opt = norm_cfg.build(alpha, dim);
    let mut x = vec![0.0; dim];
    let mut norm_err: f64 = 0.0;
    for g in &grads {
        let before = x.clone();
        opt.step(&mut x, g).unwrap();
        let d: Vec<f64> = x.iter().zip(&before).map(|(a, b)| a - b).collect();
        norm_err = norm_err.max((l2_norm(&d) - alpha).abs());
    }

    let sign_cfg = OptimizerConfig { beta: 0.0, ..OptimizerConfig::new(OptimizerId::Sign) };
    let mut opt = sign_cfg.build(alpha, dim);
    let mut x = vec![0.0; dim];
    let mut coord_err: f64 = 0.0;
    for g in &grads {
        let before = x.clone();
        opt.step(&mut x, g).unwrap();
        for i in 0..dim {
            let step = (x[i] - before[i]).abs();
            let want = if g[i] != 0.0 { alpha } else { 0.0 };
            coord_err = coord_err.max((step - want).abs());
        }
    }

    let sign_run = |c: f64| {
        let mut opt = sign_cfg.build(alpha, dim);
        let mut x = vec![1.0; dim];
        let mut traj = Vec::new();
        for g in &grads {
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            opt.step(&mut x, &scaled).unwrap();
            traj.extend_from_slice(&x);
        }
        traj
    };
    let base = sign_run(1.0);
    let scale_invariant = [0.01, 100.0].iter().all(|&c| sign_run(c) == base);
    (
        norm_err <= GEOMETRY_TOL && coord_err <= GEOMETRY_TOL && scale_invariant,
        format!(
            "normalized step |norm - alpha| {norm_err:.1e}; sign per-coordinate error {coord_err:.1e}; \
             scaling by 0.01/1/100 bitwise identical: {scale_invariant}"
        ),
    )
}

// ---- 5 ----

fn csv_bytes(records: &[optlab::harness::RunRecord], name: &str) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    write_results(records, &path, WriteOptions { timing: false, ..Default::default() }).unwrap();
    std::fs::read(&path).unwrap()
}

fn determinism() -> (bool, String) {
    let problem = ProblemSpec::Blobs { n: 256, dim: 4, classes: 3, separation: 3.0, data_seed: 5, holdout_fraction: 0.0 };
    let model = ModelSpec::Mlp(MlpSpec { input_dim: 4, hidden_dims: vec![8], num_classes: 3, activation: Activation::Tanh });
    let run = RunConfig {
        problem: problem.clone(),
        model: model.clone(),
        optimizer: OptimizerConfig::new(OptimizerId::AdamMomentum),
        step_size: 1e-2,
        batch_label: BatchLabel::M,
        batch_size: 8,
        epochs: 2,
        max_iterations: None,
        seed: 9,
        dropout_enabled: false,
        micro_batch: 4,
        eval_every_epochs: 1,
    };
    let a = csv_bytes(&[run_training(&run).unwrap()], "a.csv");
    let b = csv_bytes(&[run_training(&run).unwrap()], "b.csv");

    let spec = SweepSpec {
        problem,
        model,
        optimizers: vec![OptimizerConfig::new(OptimizerId::AdamMomentum), OptimizerConfig::new(OptimizerId::SgdMomentum)],
        base_batch: 2,
        labels: vec![BatchLabel::S, BatchLabel::Full],
        reference_iters: 16,
        seeds: vec![0, 1],
        dropout_enabled: false,
        micro_batch: 2,
        eval_every_epochs: 1,
    };
    let sweep_csv = |threads| {
        let result = sweep(&spec, threads, &RunCache::in_memory()).unwrap();
        let records: Vec<_> = result.records().into_iter().cloned().collect();
        csv_bytes(&records, "s.csv")
    };
    let s1 = sweep_csv(4);
    let s2 = sweep_csv(4);
    let s3 = sweep_csv(1);
    let passed = a == b && s1 == s2 && s1 == s3;
    (
        passed,
        format!(
            "run CSV identical: {}; 4-thread sweep CSV identical across executions: {} ({} bytes); matches 1-thread: {}",
            a == b,
            s1 == s2,
            s1.len(),
            s1 == s3
        ),
    )
}

// ---- 6 ----

/// Per-seed finals of a synthetic surface: convex in the half-exponent with
/// a divergence wall, so the protocol's greedy edge-following is exact.
fn surface<'a>(centre: f64, wall: i32, curv: &'a [f64], offsets: &'a [f64]) -> impl Fn(i32, usize) -> f64 + 'a {
    move |e, s| {
        if e > wall {
            f64::INFINITY
        } else {
            curv[s] * (e as f64 / 2.0 - centre).powi(2) + offsets[s]
        }
    }
}

/// Brute force: score every reachable half-exponent, take the best whole
/// decade, then the best of it and its two half-power neighbours.
fn oracle(f: &dyn Fn(i32, usize) -> f64, seeds: usize) -> i32 {
    let score = |e: i32| (0..seeds).map(|s| f(e, s)).fold(f64::NEG_INFINITY, f64::max);
    let key = |e: i32| (score(e), e);
    let better = |a: (f64, i32), b: (f64, i32)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    let mut best = (-30..=20).step_by(2).map(key).reduce(|a, b| if better(b, a) { b } else { a }).unwrap();
    for e in [best.1 - 1, best.1 + 1] {
        let k = key(e);
        if better(k, best) {
            best = k;
        }
    }
    best.1
}

fn grid_protocol() -> (bool, String) {
    let mut rng = RngStream::new(6, StreamId::Fixture);
    let seeds = [0u64, 1, 2];
    let mut mismatches = 0;
    let mut extended = 0;
    let mut ties = 0;
    let cases = 300;
    for case in 0..cases {
        // every fifth centre sits between two decades to force a tie
        let centre = if case % 5 == 0 {
            (rng.uniform(-12.0, 4.0)).floor() + 0.5
        } else {
            rng.uniform(-14.0, 6.0)
        };
        let wall = if case % 3 == 0 { ((centre * 2.0).ceil() as i32 + 3).max(-9) } else { i32::MAX };
        let curv: Vec<f64> = seeds.iter().map(|_| rng.uniform(0.5, 2.0)).collect();
        let offsets: Vec<f64> = seeds.iter().map(|_| if case % 5 == 0 { 0.0 } else { rng.uniform(0.0, 0.1) }).collect();
        let f = surface(centre, wall, &curv, &offsets);
        let got = grid_search_with(&seeds, |step, s| {
            let e = (2.0 * step.log10()).round() as i32;
            Ok(f(e, s as usize))
        })
        .unwrap();
        let want = oracle(&f, seeds.len());
        let evaluated: Vec<i32> = got.candidates.iter().map(|c| c.half_exponent).collect();
        let best_decade = got
            .candidates
            .iter()
            .filter(|c| c.half_exponent % 2 == 0)
            .min_by(|a, b| a.max_over_seeds.total_cmp(&b.max_over_seeds).then(a.half_exponent.cmp(&b.half_exponent)))
            .unwrap()
            .half_exponent;
        let refined = evaluated.contains(&(best_decade - 1)) && evaluated.contains(&(best_decade + 1));
        if got.selected_half_exponent != want || !refined {
            mismatches += 1;
        }
        if evaluated.iter().any(|&e| !(-10..=0).contains(&e) && e % 2 == 0) {
            extended += 1;
        }
        if case % 5 == 0 {
            ties += 1;
        }
    }
    (
        mismatches == 0 && extended > 0 && ties > 0,
        format!("{cases} surfaces ({extended} with edge extension, {ties} with tied decades): {mismatches} disagreements with brute force"),
    )
}

// ---- 7 ----

fn noise_calibration() -> (bool, String) {
    let values = noise::gaussian_fixture(QQ_DRAWS, 7);
    let qq = noise::qq_against_fit(&values).unwrap();
    let dev: Vec<f64> = qq.iter().map(|(t, e)| (e - t).abs()).collect();
    let max_dev = dev.iter().copied().fold(0.0, f64::max);
    let k = QQ_DRAWS / 100;
    let central = dev[k..QQ_DRAWS - k].iter().copied().fold(0.0, f64::max);

    let g = noise::tail_stats(&noise::gaussian_fixture(TAIL_DRAWS, 7)).unwrap();
    let t = noise::tail_stats(&noise::student_t_fixture(TAIL_DRAWS, 3.0, 7)).unwrap();
    let tails = t.excess_kurtosis > 3.0 && t.tail_ratio_99_90 > g.tail_ratio_99_90;
    (
        max_dev < QQ_MAX_DEVIATION && tails,
        format!(
            "QQ max deviation over all {QQ_DRAWS} points {max_dev:.4} (bound {QQ_MAX_DEVIATION}); \
             over the central 98% {central:.4}; Student-t(3) kurtosis {:.2}, tail ratio {:.3} vs Gaussian {:.3}",
            t.excess_kurtosis, t.tail_ratio_99_90, g.tail_ratio_99_90
        ),
    )
}

// ---- 8 ----

fn trend_output_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn trends() -> Vec<Line> {
    let study = TrendStudy::char_lm(TREND_BYTES, TREND_BASE_BATCH, TREND_REFERENCE_ITERS);
    let t = Instant::now();
    let report = run_trend_study(&study, &RunCache::in_memory()).expect("trend study");
    let secs = t.elapsed().as_secs_f64();
    let dir = trend_output_dir();
    write_results(&report.records, &dir.join("trend_results.csv"), WriteOptions::default()).unwrap();
    let table: BTreeMap<_, _> = [("dropout", &report.table.dropout), ("no_dropout", &report.table.no_dropout)].into();
    std::fs::write(dir.join("trend_table.json"), serde_json::to_string_pretty(&table).unwrap()).unwrap();
    println!(
        "     criterion 8: {} trained runs in {secs:.0}s; CSV and median table in {}",
        report.trained_runs,
        dir.display()
    );
    let ids = ["8a", "8b", "8c", "8d"];
    report
        .checks
        .iter()
        .zip(ids)
        .map(|(c, id)| {
            let line = Line { id, name: c.name, passed: c.passed, exact: false, detail: c.detail.clone(), secs };
            println!("{} criterion {} ({}): {}", if c.passed { "PASS" } else { "FAIL" }, id, c.name, c.detail);
            line
        })
        .collect()
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn main() {
    let mut lines = vec![
        timed("1", "reduction identity", true, reduction_identity),
        timed("2", "gradient correctness", true, gradient_correctness),
        timed("3", "accumulation equivalence", true, accumulation_equivalence),
        timed("4", "update geometry", true, update_geometry),
        timed("5", "determinism", true, determinism),
        timed("6", "grid protocol", true, grid_protocol),
        timed("7", "noise analyzer calibration", false, noise_calibration),
    ];
    if env_flag("OPTLAB_ACCEPTANCE_SKIP_TRENDS") {
        println!("SKIP criterion 8 (ordinal trends): OPTLAB_ACCEPTANCE_SKIP_TRENDS=1");
    } else {
        lines.extend(trends());
    }
    let strict = env_flag("OPTLAB_ACCEPTANCE_STRICT");
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.passed).collect();
    let fatal = failed.iter().any(|l| l.exact || strict);
    println!(
        "acceptance: {} of {} criteria passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.iter().map(|l| l.id).collect::<Vec<_>>().join(", ")) }
    );
    if fatal {
        std::process::exit(1);
    }
}

use std::path::Path;

use optlab::cli::{main_with_args, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK};
use optlab::harness::{run_training, RunCache, RunConfig};
use optlab::config::{parse_config, ConfigDoc};

const TRAIN: &str = r#"{
    "problem": {"kind": "quadratic", "n": 16, "dim": 3, "spread": 1.0, "data_seed": 2},
    "model": {"kind": "quadratic", "curvatures": [0.5, 1.0, 2.0], "init_scale": 1.0},
    "optimizer": "adam+m",
    "step_size": 0.05,
    "batch_label": "M",
    "batch_size": 4,
    "epochs": 3,
    "seed": 1
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn optlab(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("optlab").chain(args.iter().copied()))
}

#[test]
fn train_writes_reproducible_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.json", TRAIN);
    let out = dir.path().join("out");
    let out_s = out.display().to_string();
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &out_s, "--no-timing"]), EXIT_OK);
    let first = std::fs::read(out.join("results.csv")).unwrap();
    // header plus 4 iterations per epoch for 3 epochs
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 13);
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &out_s, "--no-timing"]), EXIT_OK);
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), first);
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &out_s, "--no-timing", "--append"]), EXIT_OK);
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), first);
    let records: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("record_"))
        .collect();
    assert_eq!(records.len(), 1);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.json", TRAIN);
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &a, "--no-timing", "--seed", "7"]), EXIT_OK);
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &b, "--no-timing"]), EXIT_OK);
    let ra = std::fs::read_to_string(Path::new(&a).join("results.csv")).unwrap();
    let rb = std::fs::read_to_string(Path::new(&b).join("results.csv")).unwrap();
    assert_ne!(ra, rb);
    assert!(ra.lines().nth(1).unwrap().contains(",7,"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out").display().to_string();
    let bad = write(dir.path(), "bad.json", &TRAIN.replace("\"epochs\"", "\"warmup\": 3, \"epochs\""));
    assert_eq!(optlab(&["train", "--config", &bad, "--out", &out]), EXIT_CONFIG);
    let malformed = write(dir.path(), "malformed.json", "{\"problem\": ");
    assert_eq!(optlab(&["train", "--config", &malformed, "--out", &out]), EXIT_CONFIG);
    let train = write(dir.path(), "train.json", TRAIN);
    assert_eq!(optlab(&["noise", "--config", &train, "--out", &out]), EXIT_CONFIG);
    assert_eq!(optlab(&["train", "--bogus-flag"]), EXIT_CONFIG);
    let unknown_opt = write(dir.path(), "opt.json", &TRAIN.replace("adam+m", "lion"));
    assert_eq!(optlab(&["train", "--config", &unknown_opt, "--out", &out]), EXIT_CONFIG);
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out").display().to_string();
    let missing = dir.path().join("nope.json").display().to_string();
    assert_eq!(optlab(&["train", "--config", &missing, "--out", &out]), EXIT_IO);
    let corpus = TRAIN
        .replace(
            r#"{"kind": "quadratic", "n": 16, "dim": 3, "spread": 1.0, "data_seed": 2}"#,
            r#"{"kind": "char_lm", "corpus": "/nonexistent/corpus.txt", "seq_len": 8}"#,
        )
        .replace(
            r#"{"kind": "quadratic", "curvatures": [0.5, 1.0, 2.0], "init_scale": 1.0}"#,
            r#"{"kind": "transformer", "vocab_size": 8, "embed_dim": 4, "num_layers": 1, "num_heads": 1, "ff_dim": 4, "seq_len": 8, "dropout_p": 0.0}"#,
        );
    let cfg = write(dir.path(), "lm.json", &corpus);
    assert_eq!(optlab(&["train", "--config", &cfg, "--out", &out]), EXIT_IO);
}

#[test]
fn grid_where_everything_diverges_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out").display().to_string();
    let text = TRAIN
        .replace("[0.5, 1.0, 2.0]", "[1e300, 1e300, 1e300]")
        .replace("\"adam+m\"", "\"sgd-m\"")
        .replacen('{', "{\"kind\": \"grid\", \"seeds\": [0, 1],", 1);
    let cfg = write(dir.path(), "grid.json", &text);
    assert_eq!(optlab(&["grid", "--config", &cfg, "--out", &out]), EXIT_DIVERGED);
}

#[test]
fn grid_selects_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = TRAIN.replace("\"step_size\": 0.05,", "").replacen('{', "{\"kind\": \"grid\", \"seeds\": [0, 1],", 1);
    let cfg = write(dir.path(), "grid.json", &text);
    assert_eq!(optlab(&["grid", "--config", &cfg, "--out", &out.display().to_string(), "--threads", "2"]), EXIT_OK);
    let grid: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("grid.json")).unwrap()).unwrap();
    let selected = grid["selected"].as_f64().unwrap();
    let best = grid["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["max_over_seeds"].as_f64().unwrap_or(f64::INFINITY))
        .fold(f64::INFINITY, f64::min);
    let chosen = grid["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["step_size"].as_f64() == Some(selected))
        .unwrap();
    assert_eq!(chosen["max_over_seeds"].as_f64().unwrap(), best);
}

const SWEEP: &str = r#"{
    "kind": "sweep",
    "problem": {"kind": "blobs", "n": 200, "dim": 4, "classes": 3, "separation": 3.0, "data_seed": 1},
    "model": {"kind": "mlp", "input_dim": 4, "hidden_dims": [6], "num_classes": 3, "activation": "tanh"},
    "optimizers": ["adam+m", "sign-m"],
    "labels": ["S", "Full"],
    "base_batch": 2,
    "reference_iters": 10,
    "seeds": [0, 1],
    "micro_batch": 2,
    "dropout_enabled": false
}"#;

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.json", SWEEP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(optlab(&["sweep", "--config", &cfg, "--out", &a.display().to_string(), "--threads", "4", "--no-timing"]), EXIT_OK);
    assert_eq!(optlab(&["sweep", "--config", &cfg, "--out", &b.display().to_string(), "--threads", "1", "--no-timing"]), EXIT_OK);
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("sweep.json")).unwrap(), std::fs::read(b.join("sweep.json")).unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 4);

    let plot = format!(
        r#"{{"kind": "plot", "plot": "loss_vs_iteration", "input": {:?}, "output": "loss.svg", "y_scale": "log",
            "filter": {{"batch_label": "Full"}}}}"#,
        a.join("results.csv").display().to_string()
    );
    let plot_cfg = write(dir.path(), "plot.json", &plot);
    assert_eq!(optlab(&["plot", "--config", &plot_cfg, "--out", &a.display().to_string()]), EXIT_OK);
    let svg = std::fs::read_to_string(a.join("loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.matches("<polyline").count() >= 2);
}

#[test]
fn noise_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "kind": "noise",
        "problem": {"kind": "blobs", "n": 64, "dim": 4, "classes": 2, "separation": 2.0, "data_seed": 3},
        "model": {"kind": "mlp", "input_dim": 4, "hidden_dims": [5], "num_classes": 2, "activation": "relu"},
        "batch_sizes": [4, 16],
        "n_draws": 120,
        "micro_batch": 8
    }"#;
    let cfg = write(dir.path(), "noise.json", text);
    let out = dir.path().join("out");
    assert_eq!(optlab(&["noise", "--config", &cfg, "--out", &out.display().to_string(), "--threads", "2"]), EXIT_OK);
    let csv = std::fs::read_to_string(out.join("noise_b4.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("draw_index,error_norm"));
    assert_eq!(csv.lines().count(), 121);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("noise_b16.json")).unwrap()).unwrap();
    assert_eq!(sidecar["batch_size"], 16);
    assert!(sidecar["fitted_sigma"].as_f64().unwrap() > 0.0);

    let qq = format!(
        r#"{{"kind": "plot", "plot": "qq", "input": {:?}, "output": "qq.svg"}}"#,
        out.join("noise_b4.csv").display().to_string()
    );
    let qq_cfg = write(dir.path(), "qq.json", &qq);
    assert_eq!(optlab(&["plot", "--config", &qq_cfg, "--out", &out.display().to_string()]), EXIT_OK);
    assert!(std::fs::read_to_string(out.join("qq.svg")).unwrap().contains("<circle"));
}

#[test]
fn disk_cache_returns_the_stored_record() {
    let dir = tempfile::tempdir().unwrap();
    let ConfigDoc::Run(config) = parse_config(TRAIN).unwrap() else { panic!() };
    let problem = config.problem.prepare().unwrap();
    let first = RunCache::with_dir(dir.path()).unwrap();
    let a = first.run(&config, &problem).unwrap();
    assert_eq!(first.trained_runs(), 1);
    let second = RunCache::with_dir(dir.path()).unwrap();
    let b = second.run(&config, &problem).unwrap();
    assert_eq!(second.trained_runs(), 0);
    assert_eq!(a, b);
    let fresh = run_training(&RunConfig { ..config }).unwrap();
    assert_eq!(fresh.iterations.len(), a.iterations.len());
    assert_eq!(
        fresh.iterations.iter().map(|i| i.train_loss.to_bits()).collect::<Vec<_>>(),
        a.iterations.iter().map(|i| i.train_loss.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}

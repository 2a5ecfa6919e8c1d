use std::path::{Path, PathBuf};
use std::process::Command;

use pairdebias::pipeline::{self, PipelineConfig, BiasReport};

const TINY: &[&str] = &[
    "gen.sentences_per_prompt=2",
    "encoder.d_model=16",
    "pretrain.epochs=2",
    "train.epochs=1",
    "train.k=3",
];

fn demo_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/demo.conf")
}

fn tiny(out: &Path, extra: &[&str]) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(demo_conf()).unwrap();
    for o in TINY.iter().chain(extra) {
        cfg.apply_override(o).unwrap();
    }
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const REPORTS: &[&str] = &[
    pipeline::CORPUS,
    pipeline::FILTERED,
    pipeline::ALIGNMENT,
    pipeline::TRAIN_LOG_JSON,
    pipeline::METRICS_BEFORE,
    pipeline::METRICS_AFTER,
    pipeline::BIAS_REPORT,
    pipeline::PROJECTION_AFTER,
    pipeline::DEBIASED_CHECKPOINT,
    "report.md",
];

#[test]
fn zero_epochs_leave_metrics_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline::run_pipeline(&tiny(dir.path(), &["train.epochs=0"])).unwrap();
    assert_eq!(report.before, report.after);
    assert_eq!(read(dir.path(), pipeline::METRICS_BEFORE), read(dir.path(), pipeline::METRICS_AFTER));
}

#[test]
fn stages_compose_to_the_full_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::run_pipeline(&tiny(a.path(), &[])).unwrap();
    let cfg = tiny(b.path(), &[]);
    pipeline::generate(&cfg).unwrap();
    pipeline::tox_filter(&cfg).unwrap();
    pipeline::pretrain(&cfg).unwrap();
    pipeline::align(&cfg).unwrap();
    pipeline::debias(&cfg).unwrap();
    pipeline::eval(&cfg).unwrap();
    pipeline::report(b.path()).unwrap();
    for name in REPORTS {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn ablation_flags_select_their_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.lambda=0", "train.random_neighbors=true", "train.k=2"]);
    assert_eq!(cfg.train.lambda, 0.0);
    pipeline::run_pipeline(&cfg).unwrap();
    let alignment: serde_json::Value = serde_json::from_slice(&read(dir.path(), pipeline::ALIGNMENT)).unwrap();
    assert_eq!(alignment["K"], 2);
    for g in alignment["groups"].as_array().unwrap() {
        let w: Vec<f64> = g["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }
    let log: serde_json::Value = serde_json::from_slice(&read(dir.path(), pipeline::TRAIN_LOG_JSON)).unwrap();
    for e in log["epochs"].as_array().unwrap() {
        assert_eq!(e["l_total"], e["l_b"]);
    }
}

#[test]
fn report_has_one_row_per_model_and_counts_filtered_groups() {
    let dir = tempfile::tempdir().unwrap();
    let bias = pipeline::run_pipeline(&tiny(dir.path(), &[])).unwrap();
    let md = String::from_utf8(read(dir.path(), "report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| before |")).count(), 1);
    assert_eq!(md.lines().filter(|l| l.starts_with("| after |")).count(), 1);
    let filtered: usize = read(dir.path(), pipeline::FILTERED).split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    assert_eq!(bias.aligned_groups + bias.filtered_groups, filtered);
    assert_eq!(bias.aligned_groups, filtered.div_ceil(2));
    assert!(dir.path().join("train_curves.svg").exists());
}

#[test]
fn sweep_emits_one_point_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["sweep.sizes=30,60,90"]);
    let manifest = pipeline::sweep(&cfg).unwrap();
    assert_eq!(manifest.points.iter().map(|p| p.groups).collect::<Vec<_>>(), vec![30, 60, 90]);
    let csv = String::from_utf8(read(dir.path(), "sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",mean_d,")).count(), 3);
    let svg = String::from_utf8(read(dir.path(), "sweep_mean_d.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 6);
    let point: BiasReport = serde_json::from_slice(&read(&dir.path().join("sweep/60"), pipeline::BIAS_REPORT)).unwrap();
    assert_eq!(point, manifest.points[1].report);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pairdebias"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let conf = demo_conf();
    let conf = conf.to_str().unwrap();
    let mut base = vec!["--config", conf, "--out-dir", out];
    for o in TINY {
        base.extend(["--set", o]);
    }
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let code = |args: Vec<String>| cli(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.code();

    assert_eq!(code(with(&["--set", "train.bogus=1", "run"])), Some(2));
    assert_eq!(code(with(&["report"])), Some(3));
    assert_eq!(code(with(&["--set", "gen.offline=false", "--set", "gen.endpoint_url=http://127.0.0.1:9/x", "--set", "gen.max_retries=0", "generate"])), Some(5));
    assert_eq!(code(with(&["run"])), Some(0));
    assert_eq!(code(with(&["--set", "train.learning_rate=1e12", "debias"])), Some(4));
    let report = cli(&with(&["report"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(report.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&report.stdout).contains("| after |"));
}

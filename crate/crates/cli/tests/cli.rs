use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mshift_cli::report::CSV_HEADER;
use mshift_cli::RunConfig;
use mshift_core::dataset::load_vectors;
use mshift_core::eval::load_report;
use mshift_core::trainer::TrainLog;

fn mshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mshift"))
        .args(args)
        .env("MSHIFT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, name: &str, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::benchmark(0);
    let spec = cfg.dataset.synthetic.as_mut().unwrap();
    spec.samples_per_class = 30;
    cfg.model.encoder_widths = vec![16];
    cfg.model.disentangler_width = 12;
    cfg.model.adaptor_width = 12;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.output_dir = PathBuf::from(format!("{name}-out"));
    edit(&mut cfg);
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_a_loadable_file_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "g", |_| {});
    let a = dir.path().join("a.vec");
    let b = dir.path().join("b.vec");
    let o = mshift(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("M=3 K=4 d=8"));
    let bundle = load_vectors(&a).unwrap();
    assert_eq!(bundle.sources[0].len(), 120);
    assert_eq!(code(&mshift(&["gen-data", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_data_rejects_a_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "k1", |c| c.dataset.synthetic.as_mut().unwrap().num_classes = 1);
    let o = mshift(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("x.vec"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("num_classes"), "{}", stderr(&o));
    assert!(!dir.path().join("x.vec").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[dataset\n").unwrap();
    assert_eq!(code(&mshift(&["train", "--config", s(&bad)])), 2);
    fs::write(&bad, "[dataset]\n").unwrap();
    assert_eq!(code(&mshift(&["train", "--config", s(&bad)])), 2);
    let cfg = small_config(dir.path(), "t0", |c| c.train.tau = 0.0);
    assert_eq!(code(&mshift(&["train", "--config", s(&cfg)])), 2);
    assert_eq!(code(&mshift(&["train", "--config", s(&cfg), "--ablation", "bogus"])), 2);
    assert_eq!(code(&mshift(&["frobnicate"])), 2);
}

#[test]
fn train_writes_exactly_the_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "t", |_| {});
    let o = mshift(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("t-out");
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.json", "evalreport.json", "trainlog.json"]);

    // eval on the same config reproduces the report
    let again = dir.path().join("again.json");
    let o = mshift(&["eval", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_report(&again).unwrap(), load_report(out.join("evalreport.json")).unwrap());

    let cfg = small_config(dir.path(), "t", |c| c.emit_embeddings = true);
    assert_eq!(code(&mshift(&["train", "--config", s(&cfg)])), 0);
    let emb = fs::read_to_string(out.join("embeddings.jsonl")).unwrap();
    // 4 domains x min(200, set size) x (h + z and e for 3 branches)
    assert_eq!(emb.lines().count(), (3 * 120 + 120) * 7);
}

#[test]
fn no_cpa_log_has_no_alignment_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "n", |_| {});
    let o = mshift(&["train", "--config", s(&cfg), "--ablation", "no_cpa"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log: TrainLog = serde_json::from_str(&fs::read_to_string(dir.path().join("n-out/trainlog.json")).unwrap()).unwrap();
    assert!(log.steps.iter().all(|s| s.terms.keys().all(|k| k == "ce" || k == "fcd")));
    assert!(log.epochs.iter().all(|e| e.mean_cpa.is_none()));
    assert!(log.steps.iter().any(|s| s.terms.contains_key("fcd")));
}

#[test]
fn diverging_run_aborts_with_exit_3_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "d", |c| {
        c.train.lr_encoder = 1e6;
        c.train.lr_heads = 1e6;
    });
    let o = mshift(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d-out/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["echo"]["status"], "aborted");
}

#[test]
fn gradcheck_reports_every_loss() {
    let o = mshift(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for loss in ["ce", "fcd", "cpa", "cpa_language", "scl"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(loss)), "{loss}");
    }
    let o = mshift(&["gradcheck", "--corrupt", "scl"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("scl at "), "{}", stderr(&o));
}

#[test]
fn report_aggregates_by_label() {
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    let mut reports = Vec::new();
    for (ablation, seeds) in [("no_fcd", 0..1u64), ("full", 0..3), ("no_cpa", 0..1)] {
        for seed in seeds {
            let name = format!("{ablation}-{seed}");
            let cfg = small_config(dir.path(), &name, |c| c.train.epochs = 2);
            let o = mshift(&["train", "--config", s(&cfg), "--ablation", ablation, "--seed", &seed.to_string()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            let d = dir.path().join(format!("{name}-out"));
            reports.push(load_report(d.join("evalreport.json")).unwrap());
            dirs.push(d);
        }
    }
    dirs.push(dir.path().join("missing"));
    let csv_path = dir.path().join("table.csv");
    let mut args = vec!["report".to_string()];
    args.extend(dirs.iter().map(|d| s(d).to_string()));
    args.extend(["--out".to_string(), s(&csv_path).to_string()]);
    let o = mshift(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: skipping"));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text, stdout(&o));

    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["full", "no_cpa", "no_fcd"]);
    let num = |r: &csv::StringRecord, i: usize| r[i].parse::<f64>().unwrap();

    let full: Vec<f64> = reports[1..4].iter().map(|r| r.target_accuracy).collect();
    let mean = full.iter().sum::<f64>() / 3.0;
    let std = (full.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert_eq!(&rows[0][1], "3");
    assert!((num(&rows[0], 2) - mean).abs() < 1e-15);
    assert!((num(&rows[0], 3) - std).abs() < 1e-15);
    assert_eq!(num(&rows[1], 2), reports[4].target_accuracy);
    assert_eq!(num(&rows[1], 6), reports[4].confusion_gap);
    assert_eq!(num(&rows[2], 4), reports[0].target_macro_f1);
    assert_eq!(num(&rows[2], 3), 0.0);

    let o = mshift(&["report", s(&dir.path().join("missing"))]);
    assert_ne!(code(&o), 0);
}

#[test]
fn shipped_benchmark_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.output_dir = RunConfig::benchmark(0).output_dir;
    assert_eq!(cfg, RunConfig::benchmark(0));
}

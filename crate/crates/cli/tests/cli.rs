use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lefm::data::{save_dataset, AnnotatedSample, DatasetLayout};

fn lefm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lefm"))
        .args(args)
        .env("LEFM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn agreeing_dataset(root: &Path, annotators: usize) {
    let samples: Vec<_> = (0..3)
        .map(|i| {
            let mask: Vec<u8> = (0..64).map(|t| u8::from((t + i) % 5 == 0)).collect();
            let image = (0..64 * 3).map(|v| (v % 7) as f32 / 7.0).collect();
            AnnotatedSample::new(format!("img{i}"), 8, 8, image, vec![mask; annotators], Some(format!("p{i}")), None).unwrap()
        })
        .collect();
    save_dataset(root, &samples, &DatasetLayout::default()).unwrap();
}

const TINY: &str = "max_epochs = 2\nbatch_size = 4\npatch_size = 16\npatch_stride = 16\nseeds = 3\nm = 0,2\ntest_fraction = 0.25\n";

fn tiny_experiment(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = lefm(&["synth", "--out", data.to_str().unwrap(), "--images", "8", "--height", "16", "--width", "16", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    data
}

#[test]
fn help_and_usage_errors() {
    for cmd in ["synth", "train", "eval", "expand", "report-coeffs", "kappa", "anova"] {
        let o = lefm(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help");
        assert!(stdout(&o).contains("Usage"));
    }
    let v = lefm(&["--version"]);
    assert!(v.status.success());
    assert!(stdout(&v).contains(lefm::VERSION));

    let o = lefm(&["kappa", "--dataset", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E1:"), "{}", stderr(&o));
    let o = lefm(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lefm(&["synth", "--out", "/tmp/never", "--rule", "CUBIC"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E1:"));
}

#[test]
fn kappa_on_perfect_agreement() {
    let dir = tempfile::tempdir().unwrap();
    agreeing_dataset(dir.path(), 3);
    let out = dir.path().join("kappa.json");
    let o = lefm(&["kappa", "--dataset", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("κ = 1.0000"), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["pooled"], 1.0);
    assert_eq!(report["images"].as_array().unwrap().len(), 3);
    assert_eq!(report["version"], lefm::VERSION);
    assert!(report["config_hash"].is_string());
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lefm(&["kappa", "--dataset", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("E2:"));

    agreeing_dataset(dir.path(), 1);
    let o = lefm(&["kappa", "--dataset", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::remove_file(dir.path().join("img1").join("image.png")).unwrap();
    let o = lefm(&["kappa", "--dataset", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("img1"), "{}", stderr(&o));
}

#[test]
fn expand_writes_twenty_channels() {
    let dir = tempfile::tempdir().unwrap();
    agreeing_dataset(dir.path(), 1);
    let prefix = dir.path().join("feat");
    let image = dir.path().join("img0").join("image.png");
    let o = lefm(&["expand", "--image", image.to_str().unwrap(), "--d", "3", "--m", "3", "--out", prefix.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(prefix.with_extension("bin")).unwrap();
    assert_eq!(bytes.len(), 8 * 8 * 20 * 4);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(prefix.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([8, 8, 20]));
    assert_eq!(side["dtype"], "float32");
    assert_eq!(side["terms"].as_array().unwrap().len(), 20);
    assert_eq!(side["terms"][0], "1");
    assert_eq!(side["version"], lefm::VERSION);
    // constant term is 1 everywhere with unit coefficients
    let first = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    assert_eq!(first, 1.0);

    let o = lefm(&["expand", "--image", image.to_str().unwrap(), "--d", "2", "--m", "3", "--out", prefix.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn runs_fixture(path: &Path, a: &[f64], b: &[f64]) {
    let mut reports = Vec::new();
    for (model, m, values) in [("baseline", 0, a), ("lefm_m3", 3, b)] {
        for (seed, &v) in values.iter().enumerate() {
            let mut r = lefm::metrics::RunReport::from_counts(
                model,
                m,
                seed as u64,
                lefm::metrics::ConfusionCounts { tp: 10, tn: 10, fp: 1, fn_: 1 },
                5,
                4,
                100,
                "f32",
                "fixture",
            );
            r.bacc = v;
            reports.push(r);
        }
    }
    let mut buf = Vec::new();
    lefm::metrics::write_runs_csv(&mut buf, &reports).unwrap();
    fs::write(path, buf).unwrap();
}

#[test]
fn anova_identical_groups() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.csv");
    runs_fixture(&runs, &[0.8; 5], &[0.8; 5]);
    let out = dir.path().join("anova.json");
    let o = lefm(&[
        "anova", "--runs", runs.to_str().unwrap(), "--metric", "BACC", "--group-a", "baseline", "--group-b", "lefm_m3", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("p = 1.0000, not significant"), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["p"], 1.0);
    assert_eq!(v["significant"], false);
    assert_eq!(v["metric"], "BACC");
    assert_eq!(v["config_hash"], "fixture");

    runs_fixture(&runs, &[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6]);
    let o = lefm(&["anova", "--runs", runs.to_str().unwrap(), "--metric", "BACC", "--group-a", "baseline", "--group-b", "lefm_m3"]);
    assert!(stdout(&o).contains("F = 13.5000"), "{}", stdout(&o));
    assert!(stdout(&o).contains(", significant"));

    let o = lefm(&["anova", "--runs", runs.to_str().unwrap(), "--metric", "AUC", "--group-a", "baseline", "--group-b", "lefm_m3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lefm(&["anova", "--runs", runs.to_str().unwrap(), "--metric", "F1", "--group-a", "baseline", "--group-b", "nope"]);
    assert_eq!(o.status.code(), Some(2));

    runs_fixture(&runs, &[0.1, f64::NAN], &[0.4, 0.5]);
    let o = lefm(&["anova", "--runs", runs.to_str().unwrap(), "--metric", "BACC", "--group-a", "baseline", "--group-b", "lefm_m3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("E3:"));
}

#[test]
fn train_eval_and_coefficient_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_experiment(dir.path());
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    let o = lefm(&["train", "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["runs.csv", "timings.csv", "summary.json", "summary.md", "split.json", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let runs = lefm::metrics::read_runs_csv(fs::File::open(out.join("runs.csv")).unwrap()).unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r.epochs <= 2 && r.version == lefm::VERSION && !r.config_hash.is_empty()));

    let ck = out.join("checkpoints").join("lefm_m2_seed3.json");
    let report = dir.path().join("coeffs.json");
    let o = lefm(&["report-coeffs", "--checkpoint", ck.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["terms"].as_array().unwrap().len(), 10);
    let total: f64 = r["terms"].as_array().unwrap().iter().map(|t| t["normalized"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r["config_hash"], runs[0].config_hash.as_str());

    let base = out.join("checkpoints").join("baseline_seed3.json");
    let o = lefm(&["report-coeffs", "--checkpoint", base.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = lefm(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let c = &e["counts"];
    let total = c["tp"].as_u64().unwrap() + c["tn"].as_u64().unwrap() + c["fp"].as_u64().unwrap() + c["fn"].as_u64().unwrap();
    assert_eq!(total, 8 * 16 * 16);

    let prefix = dir.path().join("learned");
    let image = data.join("synth_000").join("image.png");
    let o = lefm(&[
        "expand", "--image", image.to_str().unwrap(), "--m", "2", "--out", prefix.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(prefix.with_extension("bin")).unwrap().len(), 16 * 16 * 10 * 4);
}

#[test]
fn train_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_experiment(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = lefm(&[
            "train", "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed",
            "11", "--m", "2", "--no-checkpoints",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    for f in ["runs.csv", "summary.json", "summary.md", "runs/lefm_m2_seed11.json", "split.json"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f} differs");
    }
}

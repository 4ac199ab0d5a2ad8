use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drr::synth::import_cohort;

const SMALL: &str = r#"
[synth]
seed = 4
patients_per_class = 5
spots_per_patient = [2, 3]
n_bins = 300
mz_end = 980.0
biomarkers = [[{ mz = 841.8, amplitude = 25.0 }], [{ mz = 884.9, amplitude = 25.0 }]]
background_peaks = [
    { mz = 820.0, amplitude = 200.0 },
    { mz = 900.0, amplitude = 150.0 },
    { mz = 950.0, amplitude = 180.0 },
]

[train]
epochs = 2
batch_size = 8

[cv]
outer_folds = 5
inner_folds = 2
lambda_grid = [0.1, 1.0]
k_grid = [2, 4, 8]
"#;

fn drr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = drr(args);
    assert!(
        out.status.success(),
        "drr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn generate(&self, out: &str) {
        ok(&["generate", "--config", &self.s("small.toml"), "--out", &self.s(out)]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn manifest_without_times(p: &Path) -> serde_json::Value {
    let mut m: serde_json::Value = serde_json::from_slice(&read(p)).unwrap();
    let obj = m.as_object_mut().unwrap();
    obj.remove("started_unix_secs");
    obj.remove("wall_time_secs");
    m
}

#[test]
fn generate_writes_an_importable_cohort_and_manifest() {
    let w = Work::new();
    w.generate("cohort");
    let cohort = import_cohort(&w.path("cohort")).unwrap();
    assert_eq!(cohort.n, 300);
    assert_eq!(cohort.labs().len(), 2);
    let m: serde_json::Value = serde_json::from_slice(&read(&w.path("cohort/manifest.json"))).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seeds"]["synth"], 4);
    assert_eq!(m["config"]["synth"]["n_bins"], 300);
    assert!(m["version"].as_str().unwrap().starts_with("drr "));
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let w = Work::new();
    w.generate("a");
    w.generate("b");
    for f in ["meta.json", "intensities.csv"] {
        assert_eq!(read(&w.path(&format!("a/{f}"))), read(&w.path(&format!("b/{f}"))), "{f}");
    }
    assert_eq!(
        manifest_without_times(&w.path("a/manifest.json")),
        manifest_without_times(&w.path("b/manifest.json"))
    );
    ok(&["generate", "--config", &w.s("small.toml"), "--out", &w.s("c"), "--seed", "5"]);
    assert_ne!(read(&w.path("a/intensities.csv")), read(&w.path("c/intensities.csv")));
}

#[test]
fn manifest_replays_the_run() {
    let w = Work::new();
    ok(&["generate", "--config", &w.s("small.toml"), "--out", &w.s("a"), "--seed", "9"]);
    ok(&["generate", "--config", &w.s("a/manifest.json"), "--out", &w.s("b")]);
    assert_eq!(read(&w.path("a/intensities.csv")), read(&w.path("b/intensities.csv")));
}

#[test]
fn errors_map_to_exit_codes() {
    let w = Work::new();
    // usage
    assert_eq!(code(&drr(&["generate"])), 1);
    assert_eq!(code(&drr(&["frobnicate"])), 1);
    assert_eq!(code(&drr(&["cv", "--cohort", "x", "--out", "y", "--method", "svm"])), 1);
    assert_eq!(code(&drr(&["--help"])), 0);

    // invalid config
    fs::write(w.path("bad.toml"), "[synth]\nconfounder_strength = 2.0\n").unwrap();
    let out = drr(&["generate", "--config", &w.s("bad.toml"), "--out", &w.s("o")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("confounder_strength"));
    fs::write(w.path("typo.toml"), "[synth]\nseeed = 2\n").unwrap();
    assert_eq!(code(&drr(&["generate", "--config", &w.s("typo.toml"), "--out", &w.s("o")])), 2);

    // unwritable output: a path below a regular file
    fs::write(w.path("file"), "x").unwrap();
    let out = drr(&["generate", "--config", &w.s("small.toml"), "--out", &w.s("file/sub")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot create"));

    // missing cohort
    assert_eq!(code(&drr(&["train", "--cohort", &w.s("nope"), "--out", &w.s("t")])), 2);
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let w = Work::new();
    w.generate("cohort");
    fs::write(w.path("hot.toml"), format!("{SMALL}\n").replace("epochs = 2", "epochs = 2\nlr = 1e200")).unwrap();
    let out = drr(&["train", "--config", &w.s("hot.toml"), "--cohort", &w.s("cohort"), "--out", &w.s("t")]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_checkpoint_and_one_loss_row_per_epoch() {
    let w = Work::new();
    w.generate("cohort");
    let args = |out: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            w.s("small.toml"),
            "--cohort".into(),
            w.s("cohort"),
            "--out".into(),
            w.s(out),
            "--lab".into(),
            "HB".into(),
            "--lambda".into(),
            "0.1".into(),
        ]
    };
    for out in ["t1", "t2"] {
        let a = args(out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let loss = fs::read_to_string(w.path("t1/loss_history.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2);
    assert!(loss.starts_with("epoch,nll,l1,l2,weight_decay,total"));
    for f in ["checkpoint.json", "loss_history.csv"] {
        assert_eq!(read(&w.path(&format!("t1/{f}"))), read(&w.path(&format!("t2/{f}"))), "{f}");
    }
    let ck = drr::model::Checkpoint::load(&w.path("t1/checkpoint.json")).unwrap();
    assert_eq!(ck.metadata["lab"], "HB");
    assert_eq!(ck.metadata["lambda1"], 0.1);
}

#[test]
fn plain_cv_leaves_ten_checkpoints_and_a_summary_row() {
    let w = Work::new();
    w.generate("cohort");
    ok(&[
        "cv",
        "--config",
        &w.s("small.toml"),
        "--cohort",
        &w.s("cohort"),
        "--out",
        &w.s("cv"),
        "--method",
        "unregularized-nn",
        "--method",
        "roc-lda",
    ]);
    let checkpoints: Vec<_> = fs::read_dir(w.path("cv/plain-nn/checkpoints")).unwrap().collect();
    assert_eq!(checkpoints.len(), 10);
    let summary = fs::read_to_string(w.path("cv/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "method,spot_balanced_accuracy,patient_balanced_accuracy,models");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("plain-nn,") && rows[1].ends_with(",10"));
    assert!(rows[2].starts_with("roc-lda,") && rows[2].ends_with(",70"));
    let report: serde_json::Value = serde_json::from_slice(&read(&w.path("cv/roc-lda/cv_report.json"))).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 10);
    let preds = fs::read_to_string(w.path("cv/plain-nn/predictions.csv")).unwrap();
    assert!(preds.starts_with("sample_id,patient_id,trained_on,fold,predicted,true\n"));
}

#[test]
fn worker_count_leaves_cv_outputs_unchanged() {
    let w = Work::new();
    w.generate("cohort");
    for (out, workers) in [("w1", "1"), ("w4", "4")] {
        ok(&[
            "cv",
            "--config",
            &w.s("small.toml"),
            "--cohort",
            &w.s("cohort"),
            "--out",
            &w.s(out),
            "--method",
            "drr-nn",
            "--workers",
            workers,
        ]);
    }
    for f in ["summary.csv", "drr-nn/cv_report.json", "drr-nn/predictions.csv"] {
        assert_eq!(read(&w.path(&format!("w1/{f}"))), read(&w.path(&format!("w4/{f}"))), "{f}");
    }
}

#[test]
fn attribute_reports_maps_similarity_and_bins() {
    let w = Work::new();
    w.generate("cohort");
    ok(&["train", "--config", &w.s("small.toml"), "--cohort", &w.s("cohort"), "--out", &w.s("t")]);
    ok(&[
        "attribute",
        "--checkpoint",
        &w.s("t/checkpoint.json"),
        "--cohort",
        &w.s("cohort"),
        "--out",
        &w.s("a"),
        "--train-lab",
        "HB",
        "--test-lab",
        "HB",
        "--bins",
        "70,120",
    ]);
    let mean = fs::read_to_string(w.path("a/mean_relevance_train.csv")).unwrap();
    assert_eq!(mean.lines().count(), 300 + 1);
    assert_eq!(mean.lines().next().unwrap(), "mz,relevance_class0,relevance_class1");

    let report: serde_json::Value = serde_json::from_slice(&read(&w.path("a/attribution_report.json"))).unwrap();
    for c in report["classes"].as_array().unwrap() {
        assert_eq!(c["cosine_train_test"], 1.0);
    }
    assert_eq!(report["train_sparsity"], report["test_sparsity"]);

    let spots = fs::read_to_string(w.path("a/spot_relevance.csv")).unwrap();
    let cohort = import_cohort(&w.path("cohort")).unwrap();
    assert_eq!(spots.lines().count(), cohort.len() + 1);
    assert_eq!(
        spots.lines().next().unwrap(),
        "sample_id,patient_id,lab_id,label,bin70_class0,bin70_class1,bin120_class0,bin120_class1"
    );
    let first: Vec<&str> = spots.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[3], cohort.samples[0].label.to_string());
    assert!(first[4..].iter().all(|v| v.parse::<f64>().is_ok()));
}

#[test]
fn attribute_rejects_a_mismatched_cohort() {
    let w = Work::new();
    w.generate("cohort");
    ok(&["train", "--config", &w.s("small.toml"), "--cohort", &w.s("cohort"), "--out", &w.s("t")]);
    let wider = SMALL.replace("n_bins = 300", "n_bins = 320");
    fs::write(w.path("wide.toml"), wider).unwrap();
    ok(&["generate", "--config", &w.s("wide.toml"), "--out", &w.s("wide")]);
    let out = drr(&[
        "attribute",
        "--checkpoint",
        &w.s("t/checkpoint.json"),
        "--cohort",
        &w.s("wide"),
        "--out",
        &w.s("a"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("300"));
}

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use colorsem_core::datasets::builtin_uw58;
use tempfile::TempDir;

fn colorsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorsem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = colorsem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = colorsem(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    common::write_planted_corpus(
        &dir.path().join("corpus"),
        &builtin_uw58(),
        &common::fruit_rows(2),
        3,
        common::Layout::Figure,
        11,
    );
    dir
}

#[test]
fn convert_examples() {
    let out = ok(&["convert", "--xyy", "0.31273", "0.32902", "100"]);
    assert!(out.starts_with("L 100.0000 a 0.0000 b 0.0000"), "{out}");
    let out = ok(&["convert", "--srgb", "255", "255", "255"]);
    let l: f64 = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((l - 100.0).abs() < 0.01);
    fails(&["convert", "--xyy", "0.3", "0.3"]);
    fails(&["convert", "--srgb", "256", "0", "0"]);
    fails(&["convert", "--lab", "50", "x", "0"]);
    fails(&["convert"]);
}

#[test]
fn featurize_train_estimate_evaluate() {
    let dir = fixture();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    ok(&["featurize", "--corpus", s(&corpus), "--ratings", "fruit", "--output", s(&out), "--seg-iterations", "50"]);
    let csv = fs::read_to_string(out.join("design_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 58);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + 186 + 1);
    let digest = fs::read_to_string(out.join("design_matrix.sha256")).unwrap();
    assert_eq!(digest.split_whitespace().next().unwrap().len(), 64);
    assert!(out.join("manifest.json").is_file());

    let matrix = out.join("design_matrix.csv");
    ok(&["cv-curve", "--matrix", s(&matrix), "--output", s(&out)]);
    let curve = fs::read_to_string(out.join("cv_curve.csv")).unwrap();
    let ks: Vec<usize> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ks[0], 0);
    assert!(ks.windows(2).all(|w| w[0] < w[1]));

    ok(&["train", "--matrix", s(&matrix), "--k", "4", "--output", s(&out)]);
    let model = fs::read(out.join("model.json")).unwrap();
    ok(&["train", "--matrix", s(&matrix), "--k", "4", "--output", s(&out)]);
    assert_eq!(fs::read(out.join("model.json")).unwrap(), model);
    fails(&["train", "--matrix", s(&matrix), "--k", "187", "--output", s(&out)]);

    ok(&["estimate", "--model", s(&out.join("model.json")), "--corpus", s(&corpus), "--output", s(&out)]);
    let est = fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 59);
    assert_eq!(est.lines().next().unwrap().split(',').count(), 3);

    ok(&["evaluate", "--estimates", s(&out.join("estimates.csv")), "--ratings", "fruit", "--output", s(&out)]);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 1 + 2);
    assert!(report.lines().nth(1).unwrap().starts_with("overall,,116,"));
    assert_eq!(fs::read_to_string(out.join("scatter.csv")).unwrap().lines().count(), 1 + 116);

    // self comparison
    let self_out = dir.path().join("self");
    let stdout = ok(&["evaluate", "--estimates", s(&out.join("estimates.csv")), "--ratings", s(&out.join("estimates.csv")), "--output", s(&self_out)]);
    assert!(stdout.starts_with("overall r 1.0000"), "{stdout}");

    // unknown feature id in the model
    let bad_model = dir.path().join("bad.json");
    let text = String::from_utf8(model).unwrap();
    let first_id = text.split("\"features\": [").nth(1).unwrap().split('"').nth(1).unwrap().to_string();
    fs::write(&bad_model, text.replace(&first_id, "ball_dr7_w20")).unwrap();
    fails(&["estimate", "--model", s(&bad_model), "--corpus", s(&corpus), "--output", s(&out)]);
}

#[test]
fn max_images_and_errors() {
    let dir = fixture();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    ok(&["featurize", "--corpus", s(&corpus), "--max-images", "2", "--stage", "ball_only", "--output", s(&out), "--seg-iterations", "20"]);
    let csv = fs::read_to_string(out.join("design_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 58);

    let err = fails(&["featurize", "--corpus", s(&dir.path().join("missing")), "--output", s(&out)]);
    assert!(err.contains("does not exist"), "{err}");

    // one concept only
    ok(&["featurize", "--corpus", s(&corpus), "--concepts", "mango", "--ratings", "fruit", "--stage", "ball_only", "--max-images", "1", "--output", s(&out), "--seg-iterations", "20"]);
    let err = fails(&["cv-curve", "--matrix", s(&out.join("design_matrix.csv")), "--output", s(&out)]);
    assert!(err.contains("at least 2 concepts"), "{err}");

    // an empty concept folder
    fs::create_dir_all(corpus.join("empty")).unwrap();
    fails(&["corpus", "scan", "--corpus", s(&corpus), "--output", s(&out)]);
}

#[test]
fn corpus_scan_and_dimension_mismatch() {
    let dir = fixture();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    let stdout = ok(&["corpus", "scan", "--corpus", s(&corpus), "--output", s(&out)]);
    assert_eq!(stdout.trim(), "6 images, 2 concepts");

    let short = dir.path().join("short.csv");
    fs::write(&short, "color,mango\n1,0.5\n2,0.25\n3,0.1\n").unwrap();
    let err = fails(&["evaluate", "--estimates", s(&short), "--ratings", "fruit", "--output", s(&out)]);
    assert!(err.contains("colors"), "{err}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = fixture();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# fixture run\ncorpus = {}\nstage = ball_only\nmax_images = 1\nseg_iterations = 20\noutput = {}\n",
            s(&corpus),
            s(&out)
        ),
    )
    .unwrap();
    let stdout = ok(&["featurize", "--config", s(&cfg)]);
    assert_eq!(stdout.trim(), "116 rows x 30 features");
    let stdout = ok(&["featurize", "--config", s(&cfg), "--max-images", "2"]);
    assert_eq!(stdout.trim(), "232 rows x 30 features");
    fs::write(&cfg, "k = 0\n").unwrap();
    fails(&["featurize", "--config", s(&cfg), "--corpus", s(&corpus)]);
}

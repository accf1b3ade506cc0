//! End-to-end runs of the `pfgen` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pfgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small network and budget so each run takes well under a second.
const TINY: [&str; 16] = [
    "--set",
    "hidden_layers=1",
    "--set",
    "hidden_width=8",
    "--set",
    "n=4",
    "--set",
    "dt=0.25",
    "--set",
    "batch_size=64",
    "--set",
    "eval_samples=500",
    "--set",
    "num_projections=50",
    "--set",
    "pool_size=2000",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--quiet", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    pfgen(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_with_code_two_and_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"steps\": 10,\n  \"lambda\": \n}").unwrap();
    let o = pfgen(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "lamda=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));
}

#[test]
fn invalid_combination_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "generator=vanilla", "--set", "lambda=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn zero_steps_writes_an_initial_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["steps_completed"], 0);
    assert!(r["map_error"].as_f64().unwrap() > 0.0);
    let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus the step-0 row");
    assert!(dir.path().join("checkpoint.bin").exists());
}

#[test]
fn lambda_override_is_echoed_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "steps=2", "--set", "lambda=0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["config"]["lambda"], 0.25);
    let stdout: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, r);
}

#[test]
fn repeated_train_and_eval_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = train(d.path(), &["--set", "steps=3", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ra = fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.path().join("report.json")).unwrap());
    assert_eq!(
        fs::read(a.path().join("checkpoint.bin")).unwrap(),
        fs::read(b.path().join("checkpoint.bin")).unwrap()
    );

    let ck = a.path().join("checkpoint.bin");
    let mut evals = Vec::new();
    for sub in ["e1", "e2"] {
        let out = a.path().join(sub);
        let o = pfgen(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--samples",
            "800",
            "--seed",
            "4",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        evals.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(evals[0], evals[1]);
}

#[test]
fn eval_on_a_missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfgen(&[
        "eval",
        "--checkpoint",
        "/nonexistent/ck.bin",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn bench_dry_run_lists_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfgen(&["bench", "table1", "--dry-run", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    for label in ["Vanilla", "Discrete", "Continuous"] {
        assert!(md.contains(label), "{md}");
    }
    assert_eq!(md, fs::read_to_string(dir.path().join("bench.md")).unwrap());
    let o = pfgen(&["bench", "table2", "--dry-run", "--out", dir.path().to_str().unwrap()]);
    assert!(!String::from_utf8(o.stdout).unwrap().contains("Discrete"));
}

fn check_svg(path: &Path) -> roxmltree::Document<'static> {
    let text: &'static str = Box::leak(fs::read_to_string(path).unwrap().into_boxed_str());
    roxmltree::Document::parse(text).expect("well-formed SVG")
}

#[test]
fn oracle_plot_is_well_formed_svg_with_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfgen(&[
        "plot",
        "--oracle",
        "analytic",
        "--problem",
        "ring",
        "--out",
        dir.path().to_str().unwrap(),
        "--samples",
        "200",
        "--arrows",
        "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = check_svg(&dir.path().join("plot.svg"));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let circles = doc.descendants().filter(|n| n.has_tag_name("circle")).count();
    assert_eq!(circles, 600);
    let lines = doc.descendants().filter(|n| n.has_tag_name("line")).count();
    assert_eq!(lines, 60, "estimated and reference arrows");
    let arrows = fs::read_to_string(dir.path().join("arrows.csv")).unwrap();
    assert_eq!(arrows.lines().count(), 31);
}

#[test]
fn checkpoint_plot_uses_the_trained_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "steps=1", "--set", "problem=ring"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("plot");
    let ck = dir.path().join("checkpoint.bin");
    let o = pfgen(&[
        "plot",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    check_svg(&out.join("plot.svg"));
}

#[test]
fn plot_without_a_source_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfgen(&["plot", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_mnist_files_print_the_download_hint() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfgen(&[
        "mnist-translate",
        "--images",
        "/nonexistent/train-images-idx3-ubyte",
        "--labels",
        "/nonexistent/labels",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("mnist_from_npm.py"), "{}", stderr(&o));
}

#[test]
fn pca_fit_on_synthetic_idx_writes_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40u32;
    let mut img = vec![0, 0, 8, 3];
    for d in [n, 28, 28] {
        img.extend(d.to_be_bytes());
    }
    img.extend((0..n * 784).map(|i| ((i * 7919) % 251) as u8));
    let mut lab = vec![0, 0, 8, 1];
    lab.extend(n.to_be_bytes());
    lab.extend((0..n).map(|i| (i % 10) as u8));
    let (ip, lp, out) = (dir.path().join("i"), dir.path().join("l"), dir.path().join("pca.bin"));
    fs::write(&ip, img).unwrap();
    fs::write(&lp, lab).unwrap();
    let o = pfgen(&[
        "pca-fit",
        "--images",
        ip.to_str().unwrap(),
        "--labels",
        lp.to_str().unwrap(),
        "--k",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = pfgen::pipeline::PcaModel::load(&out).unwrap();
    assert_eq!((model.dim(), model.k()), (784, 5));

    let o = pfgen(&[
        "pca-fit",
        "--images",
        ip.to_str().unwrap(),
        "--labels",
        lp.to_str().unwrap(),
        "--k",
        "41",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

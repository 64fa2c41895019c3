use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accel-dpmm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn generate(dir: &Path, seed: &str) {
    let o = bin(&["generate", "--train", "150", "--test", "20", "--seed", seed, "--out", &s(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_writes_files_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    generate(&a, "4");
    generate(&b, "4");
    for f in ["train.csv", "test.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = fs::read_to_string(a.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 150);
    assert!(train.lines().all(|l| l.split(',').count() == 10));
    assert_eq!(fs::read_to_string(a.join("truth.csv")).unwrap().lines().count(), 171);
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let out = s(t.path());
    for args in [
        vec!["generate", "--train", "0", "--out", &out],
        vec!["generate", "--alpha", "-1", "--out", &out],
        vec!["run", "--mode", "nope", "--train", "x", "--out", &out],
        vec!["run", "--rho", "1.5", "--train", "x", "--out", &out],
        vec!["frobnicate"],
    ] {
        assert_eq!(code(&bin(&args)), 2, "{args:?}");
    }
}

#[test]
fn data_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let missing = s(&t.path().join("missing.csv"));
    let out = s(&t.path().join("out"));
    assert_eq!(code(&bin(&["run", "--train", &missing, "--out", &out])), 1);
    let ragged = t.path().join("ragged.csv");
    fs::write(&ragged, "1,2\n1\n").unwrap();
    let o = bin(&["run", "--train", &s(&ragged), "--workers", "1", "--iters", "60", "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
    assert_eq!(code(&bin(&["eval", "--features", &missing, "--test", &missing])), 1);
}

#[test]
fn eval_reproduces_final_metric() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "9");
    let train = s(&t.path().join("train.csv"));
    let test = s(&t.path().join("test.csv"));
    for (mode, workers) in [("accelerated", "3"), ("collapsed", "1")] {
        let out = t.path().join(mode);
        let out_s = s(&out);
        let args = [
            "run", "--mode", mode, "--train", &train, "--test", &test, "--iters", "40",
            "--accel-iters", "10", "--workers", workers, "--clock", "logical", "--out", &out_s,
        ];
        let o = bin(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["metrics.csv", "popularity.csv", "features.csv", "assignments.csv", "manifest.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        let alpha = summary["alpha"].as_f64().unwrap().to_string();
        let o = bin(&[
            "eval", "--features", &s(&out.join("features.csv")), "--counts", &s(&out.join("popularity.csv")),
            "--test", &test, "--alpha", &alpha, "--gamma", "1.0",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let printed: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let last: f64 = metrics.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert!((printed - last).abs() < 1e-9, "{mode}: {printed} vs {last}");
    }
}

#[test]
fn eval_of_single_cluster_without_alpha_is_plain_likelihood() {
    let t = tempfile::tempdir().unwrap();
    let features = t.path().join("features.csv");
    fs::write(&features, "cluster_id,count,theta_0,theta_1\n0,5,0.25,0.75\n").unwrap();
    let test = t.path().join("test.csv");
    fs::write(&test, "1,1\n0,3\n").unwrap();
    let o = bin(&["eval", "--features", &s(&features), "--test", &s(&test), "--alpha", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    // 2 * 0.25 * 0.75 and 0.75^3
    let expected = (2.0 * 0.25 * 0.75f64).ln() + 3.0 * 0.75f64.ln();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn tampered_manifest_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "2");
    let out = t.path().join("r");
    let o = bin(&[
        "run", "--mode", "uncollapsed", "--train", &s(&t.path().join("train.csv")), "--workers", "2",
        "--iters", "5", "--clock", "logical", "--out", &s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = out.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"seed\": 0", "\"seed\": 1");
    fs::write(&manifest, text).unwrap();
    assert_eq!(code(&bin(&["run", "--manifest", &s(&manifest), "--out", &s(&t.path().join("r2"))])), 1);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dual_aae::data_io::load_features_csv;
use dual_aae::evaluation::evaluate_dataset;
use dual_aae::networks::{encode_all, hard_assignments};
use dual_aae::persistence::load_model;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dual-aae"));
    c.env_remove("DUAL_AAE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"{
    "data": {"kind": "csv", "path": "data.csv", "has_labels": true, "mode": "pixel"},
    "priors": {"k": 3, "d_h": 2, "d_z": 1},
    "architecture": {"encoder": [16], "decoder": [16], "critic": [8]},
    "training": {"lr_enc_dec": 0.001, "lr_critic": 0.001, "batch_size": 20, "epochs": 3, "seed": 5},
    "output": {"dir": "OUT"}
}"#;

/// Writes a labelled three-cluster CSV and a config training on it.
fn setup(dir: &Path, out: &str) -> PathBuf {
    let data = dir.join("data.csv");
    if !data.exists() {
        ok(&run(&["synth", "--k", "3", "--dim", "6", "--n-per-cluster", "40", "--seed", "1", "--pixel", "--out", p(&data)]));
    }
    let cfg = dir.join(format!("{out}.json"));
    fs::write(&cfg, CONFIG.replace("OUT", out)).unwrap();
    cfg
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = setup(dir, "run");
    ok(&run(&["train", "--config", p(&cfg)]));
    dir.join("run").join("final.daae")
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "a");
    let stdout = ok(&run(&["train", "--config", p(&cfg)]));
    assert!(dir.path().join("a/final.daae").exists());
    let log = fs::read_to_string(dir.path().join("a/metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log, stdout);
    for (i, line) in log.lines().enumerate() {
        assert!(line.starts_with(&format!("epoch={} recon_x=", i + 1)), "{line}");
    }
}

#[test]
fn identical_runs_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["x", "y"] {
        ok(&run(&["train", "--config", p(&setup(dir.path(), out))]));
    }
    let a = fs::read(dir.path().join("x/metrics.log")).unwrap();
    let b = fs::read(dir.path().join("y/metrics.log")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(dir.path().join("x/final.daae")).unwrap(), fs::read(dir.path().join("y/final.daae")).unwrap());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["train", "--config", p(&setup(dir.path(), "plain"))]));
    let cfg = setup(dir.path(), "seeded");
    ok(&bin().env("DUAL_AAE_SEED", "77").args(["train", "--config", p(&cfg)]).output().unwrap());
    assert_ne!(
        fs::read(dir.path().join("plain/final.daae")).unwrap(),
        fs::read(dir.path().join("seeded/final.daae")).unwrap()
    );
    let bad = bin().env("DUAL_AAE_SEED", "abc").args(["train", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "bad");
    fs::write(&cfg, CONFIG.replace(r#""k": 3, "#, "")).unwrap();
    let out = run(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("priors") && err.contains("`k`"), "{err}");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "nan");
    let text = CONFIG.replace(r#""mode": "pixel""#, r#""mode": "feature""#).replace(r#""lr_enc_dec": 0.001"#, r#""lr_enc_dec": 1e300"#);
    fs::write(&cfg, text).unwrap();
    let out = run(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reports_each_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let data = dir.path().join("data.csv");
    let report = dir.path().join("report.txt");
    ok(&run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--has-labels", "--gamma", "0.9,0.5", "--out", p(&report)]));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let field = |line: &str, key: &str| -> String {
        line.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{key}="))).unwrap().to_string()
    };
    let gammas: Vec<f64> = lines.iter().map(|l| field(l, "gamma").parse().unwrap()).collect();
    assert_eq!(gammas, [0.0, 0.5, 0.9]);
    let rates: Vec<f64> = lines.iter().map(|l| field(l, "rejection_rate").parse().unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] >= w[0]), "{rates:?}");

    let model = load_model(&ckpt).unwrap();
    let ds = load_features_csv(&data, true).unwrap();
    let enc = encode_all(&model, ds.features()).unwrap();
    let expected = evaluate_dataset(&ds, &enc.y_probs, 0.0).unwrap();
    assert_eq!(lines[0], expected.to_string());
}

#[test]
fn eval_without_labels_reports_na() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let ds = load_features_csv(&dir.path().join("data.csv"), true).unwrap();
    let unlabelled = dir.path().join("unlabelled.csv");
    dual_aae::data_io::write_features_csv(&unlabelled, ds.features(), None).unwrap();
    let stdout = ok(&run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&unlabelled)]));
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("acc=na") && stdout.contains("acc_accepted=na"), "{stdout}");
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&run(&["generate", "--checkpoint", p(&ckpt), "--cluster", "2", "--n", "7", "--out", p(out)]));
    }
    let rows = csv_rows(&a);
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.len() == 6 && r.iter().all(|v| (0.0..=1.0).contains(v))));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn traverse_sweeps_every_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("t.csv");
    ok(&run(&["traverse", "--checkpoint", p(&ckpt), "--style", "1", "--steps", "5", "--out", p(&out)]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 3 * 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0] as usize, i / 5);
        assert!((r[1] - (-2.0 + (i % 5) as f64)).abs() < 1e-12, "{r:?}");
        assert_eq!(r.len(), 2 + 6);
    }
}

#[test]
fn embed_matches_library_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let data = dir.path().join("data.csv");
    let out = dir.path().join("e.csv");
    ok(&run(&["embed", "--checkpoint", p(&ckpt), "--data", p(&data), "--has-labels", "--out", p(&out)]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 120);

    let model = load_model(&ckpt).unwrap();
    let ds = load_features_csv(&data, true).unwrap();
    let enc = encode_all(&model, ds.features()).unwrap();
    let clusters = hard_assignments(&enc.y_probs);
    for (i, r) in rows.iter().enumerate() {
        let n = r.len();
        assert_eq!(n, 16 + 2);
        assert_eq!(r[n - 2] as usize, clusters[i]);
        let max = r[n - 1];
        assert!(max > 0.0 && max <= 1.0);
        assert!((max - enc.y_probs.row(i).iter().cloned().fold(f64::MIN, f64::max)).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_requests_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("o.csv");
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(code(&["generate", "--checkpoint", p(&ckpt), "--cluster", "3", "--n", "2", "--out", p(&out)]), Some(2));
    assert_eq!(code(&["traverse", "--checkpoint", p(&ckpt), "--style", "2", "--out", p(&out)]), Some(2));
    assert_eq!(code(&["traverse", "--checkpoint", p(&ckpt), "--style", "0", "--steps", "0", "--out", p(&out)]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dir.path().join("data.csv"))]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dir.path().join("data.csv")), "--has-labels", "--gamma", "1.5"]), Some(2));
    assert_eq!(code(&["generate", "--checkpoint", p(&ckpt), "--cluster", "x", "--n", "2", "--out", p(&out)]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.daae");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&["generate", "--checkpoint", p(&bad), "--cluster", "0", "--n", "1", "--out", p(&dir.path().join("g.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let missing = run(&["generate", "--checkpoint", p(&dir.path().join("none.daae")), "--cluster", "0", "--n", "1", "--out", p(&dir.path().join("g.csv"))]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn square_pixel_data_also_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&run(&["synth", "--k", "3", "--dim", "4", "--n-per-cluster", "40", "--seed", "2", "--pixel", "--out", p(&data)]));
    let cfg = dir.path().join("sq.json");
    fs::write(&cfg, CONFIG.replace("OUT", "sq").replace(r#""epochs": 3"#, r#""epochs": 1"#)).unwrap();
    ok(&run(&["train", "--config", p(&cfg)]));
    let ckpt = dir.path().join("sq/final.daae");

    let gen = dir.path().join("gen.csv");
    ok(&run(&["generate", "--checkpoint", p(&ckpt), "--cluster", "0", "--n", "3", "--out", p(&gen)]));
    for i in 0..3 {
        let pgm = fs::read(dir.path().join(format!("gen-{i:04}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"), "{:?}", &pgm[..12]);
        assert_eq!(pgm.len(), b"P5\n2 2\n255\n".len() + 4);
    }

    let trav = dir.path().join("trav.csv");
    ok(&run(&["traverse", "--checkpoint", p(&ckpt), "--style", "0", "--steps", "4", "--out", p(&trav)]));
    let grid = fs::read(dir.path().join("trav-grid.pgm")).unwrap();
    assert!(grid.starts_with(b"P5\n8 6\n255\n"));
}

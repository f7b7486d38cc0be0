use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epgforge"));
    c.env_remove("EPGFORGE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok_report(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn constant_config(dir: &Path, name: &str, n_tr: usize, flip: f64) -> PathBuf {
    let flips = vec![format!("{flip}"); n_tr].join(", ");
    write_config(
        dir,
        name,
        &format!(
            "n_tr = {n_tr}\ntr_ms = 7.38\nte_ms = 3.73\ninversion = true\nti_ms = 7.74\nexplicit_deg = [{flips}]\n\
             [rf]\nduration_ms = 0.568\nn_rf = 16\n[slice]\nthickness_mm = 5.0\nn_z = 32\n"
        ),
    )
}

fn spline_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "spline.toml",
        "n_tr = 120\ntr_ms = 7.38\nte_ms = 3.73\nflip_kind = \"spline5\"\nseed = 17\ninversion = true\nti_ms = 7.74\n\
         [slice]\nn_z = 8\n",
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn zero_flips_give_zero_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = constant_config(dir.path(), "zero.toml", 20, 0.0);
    let out = dir.path().join("s.csv");
    for model in ["epg", "epgbloch", "bloch"] {
        ok_report(&["simulate", "--config", p(&cfg), "--model", model, "--t1", "800", "--t2", "80", "--n-iso", "64", "--out", p(&out)]);
        let text = fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("tr_index,re,im"));
        for l in lines {
            let cols: Vec<f64> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert!(cols.iter().all(|v| *v == 0.0), "{model}: {l}");
        }
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spline_config(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok_report(&["--threads", "1", "simulate", "--config", p(&cfg), "--t1", "800", "--t2", "80", "--grad", "--out", p(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let header = fs::read_to_string(&a).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "tr_index,re,im,dlogt1_re,dlogt1_im,dlogt2_re,dlogt2_im");
}

#[test]
fn compare_engines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = constant_config(dir.path(), "c120.toml", 100, 120.0);
    let cfg10 = constant_config(dir.path(), "c10.toml", 100, 10.0);
    let nrmse = |cfg: &Path, a: &str, b: &str| -> f64 {
        let r = ok_report(&["compare", "--config", p(cfg), "--a", a, "--b", b, "--t1", "800", "--t2", "80"]);
        r["metrics"]["nrmse"].as_f64().unwrap()
    };
    assert_eq!(nrmse(&cfg, "epgbloch", "epgbloch"), 0.0);
    let large = nrmse(&cfg, "epg", "epgbloch");
    let small = nrmse(&cfg10, "epg", "epgbloch");
    assert!(large > small, "{large} vs {small}");
    assert!(nrmse(&cfg, "epgbloch", "bloch") < 5e-3);
    let spline = spline_config(dir.path());
    assert!(nrmse(&spline, "epgbloch", "bloch") < 5e-3);
}

#[test]
fn dictgen_and_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spline_config(dir.path());
    let dict = dir.path().join("d.epgd");
    let r = ok_report(&[
        "--threads", "1", "dictgen", "--config", p(&cfg), "--t1", "200:2000:6", "--t2", "20:200:5", "--out", p(&dict),
    ]);
    assert_eq!(r["metrics"]["n_atoms"], 30);
    // second run is byte-identical
    let dict2 = dir.path().join("d2.epgd");
    ok_report(&["--threads", "1", "dictgen", "--config", p(&cfg), "--t1", "200:2000:6", "--t2", "20:200:5", "--out", p(&dict2)]);
    assert_eq!(fs::read(&dict).unwrap(), fs::read(&dict2).unwrap());

    // 200 · 10^(2/5) ms and 20 · 10^(1/4) ms lie on the grid
    let t1 = format!("{}", 200.0 * 10f64.powf(0.4));
    let t2 = format!("{}", 20.0 * 10f64.powf(0.25));
    let sig = dir.path().join("s.csv");
    ok_report(&["simulate", "--config", p(&cfg), "--t1", &t1, "--t2", &t2, "--out", p(&sig)]);
    let res = dir.path().join("m.csv");
    let r = ok_report(&["match", "--dict", p(&dict), "--signal", p(&sig), "--config", p(&cfg), "--out", p(&res)]);
    assert!(r["metrics"]["min_correlation"].as_f64().unwrap() > 0.999_999);
    let text = fs::read_to_string(&res).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let got1: f64 = row[2].parse().unwrap();
    let got2: f64 = row[3].parse().unwrap();
    assert!((got1 - t1.parse::<f64>().unwrap()).abs() < 1e-3);
    assert!((got2 - t2.parse::<f64>().unwrap()).abs() < 1e-3);

    // a different sequence is refused
    let other = constant_config(dir.path(), "other.toml", 120, 30.0);
    let out = run(&["match", "--dict", p(&dict), "--signal", p(&sig), "--config", p(&other), "--out", p(&res)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "n_tr = 3\ntr_ms = 5.0\nte_ms = 9.0\nexplicit_deg = [1, 2, 3]\n");
    let out = dir.path().join("x.csv");
    let r = run(&["simulate", "--config", p(&bad), "--t1", "800", "--t2", "80", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let cfg = spline_config(dir.path());
    let r = run(&["simulate", "--config", p(&cfg), "--model", "gru", "--t1", "800", "--t2", "80", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let junk = dir.path().join("junk.epgd");
    fs::write(&junk, b"not a dictionary").unwrap();
    let sig = dir.path().join("s.csv");
    ok_report(&["simulate", "--config", p(&cfg), "--t1", "800", "--t2", "80", "--out", p(&sig)]);
    let r = run(&["match", "--dict", p(&junk), "--signal", p(&sig), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(4));

    let r = run(&["--threads", "0", "bench", "--batch-sizes", "1"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn training_data_and_surrogate_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t.epgt");
    ok_report(&[
        "train-data", "--n-signals", "10", "--seed", "3", "--n-tr", "120", "--n-rf", "4", "--n-z", "4", "--n-k", "8", "--out", p(&data),
    ]);
    let bytes = fs::read(&data).unwrap();
    assert_eq!(&bytes[..4], b"EPGT");

    let weights = dir.path().join("w.gruw");
    epgforge::surrogate::save_weights(&epgforge::GruNetwork::standard(6), &weights).unwrap();
    let csv = dir.path().join("eval.csv");
    let r = ok_report(&["eval-surrogate", "--weights", p(&weights), "--data", p(&data), "--out", p(&csv)]);
    // an all-zero network misses everything: NRMSE exactly 1
    assert_eq!(r["metrics"]["nrmse_signal_spline5"].as_f64().unwrap(), 1.0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);

    let cfg = spline_config(dir.path());
    let out = dir.path().join("g.csv");
    ok_report(&["simulate", "--config", p(&cfg), "--model", "gru", "--weights", p(&weights), "--t1", "800", "--t2", "80", "--out", p(&out)]);
}

#[test]
fn optimize_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let r = ok_report(&[
        "optimize", "--ntr", "60", "--pop", "1", "--maxgen", "3", "--n-rf", "4", "--n-z", "4", "--n-k", "8", "--seed", "2", "--out", p(&out),
    ]);
    assert!(r["metrics"]["best_objective"].as_f64().unwrap().is_finite());
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 5);
    assert_eq!(fs::read_to_string(out.join("flip_train.csv")).unwrap().lines().count(), 61);
    let control = fs::read_to_string(out.join("control.csv")).unwrap();
    for v in control.lines().skip(1) {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=90.0).contains(&v));
    }
}

#[test]
fn bench_reports_timings() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("b.csv");
    let r = ok_report(&["bench", "--batch-sizes", "2,8", "--n-tr", "20", "--out", p(&table)]);
    assert!(r["metrics"]["gru_2_ms"].as_f64().unwrap() > 0.0);
    assert!(r["metrics"]["gru_speedup"].as_f64().is_some());
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 5);
}

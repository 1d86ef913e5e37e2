use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use romdot::io::{read_matrix, MatrixData};

const MINIMAL: &str = r#"{
    "grid": {"dim": 2, "nodes": [17]},
    "medium": {"diffusion": 0.1},
    "layout": {"n_sources": 4, "n_detectors": 3},
    "truth": [{"alpha": 1.0, "beta": 2.5, "center": [0.1, 0.9]}],
    "omegas": [0.0, 0.05],
    "seed": 3,
    "sketch": {"l_s": 2, "l_d": 2},
    "inversion": {"n_k": 2}
}"#;

fn romdot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_romdot")).args(args).output().unwrap()
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) {
    let out = romdot(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn key_values(path: &Path) -> std::collections::HashMap<String, String> {
    csv_rows(path).into_iter().map(|r| (r[0].clone(), r[1].clone())).collect()
}

#[test]
fn simulate_writes_data_with_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    run_ok(&["simulate", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    for f in ["data.mat", "clean.mat", "truth.pgm", "simulate.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    match read_matrix(&out.join("data.mat")).unwrap() {
        MatrixData::Complex(d) => assert_eq!(d.shape(), (3, 4 * 2)),
        MatrixData::Real(_) => panic!("data must be complex"),
    }
    let pgm = std::fs::read(out.join("truth.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n17 17\n255\n"));
    assert_eq!(pgm.len(), 13 + 17 * 17);
}

#[test]
fn noise_norm_is_relative_to_the_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    run_ok(&["simulate", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let kv = key_values(&out.join("simulate.csv"));
    let noise: f64 = kv["noise_norm"].parse().unwrap();
    let clean: f64 = kv["clean_norm"].parse().unwrap();
    let ratio = noise / clean;
    assert!((ratio - 1e-3).abs() < 0.35e-3, "noise/clean = {ratio}");
}

#[test]
fn reruns_and_thread_counts_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let sc = sc.to_str().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|k| dir.path().join(format!("run{k}"))).collect();
    for (d, threads) in dirs.iter().zip(["1", "1", "3"]) {
        let d = d.to_str().unwrap();
        run_ok(&["simulate", sc, "--out", d, "--threads", threads]);
        run_ok(&["invert", sc, "--mode", "rom-rand", "--out", d, "--threads", threads]);
    }
    let names: Vec<_> = std::fs::read_dir(&dirs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() >= 10);
    for n in &names {
        let a = std::fs::read(dirs[0].join(n)).unwrap();
        assert_eq!(a, std::fs::read(dirs[1].join(n)).unwrap(), "{n:?}");
        assert_eq!(a, std::fs::read(dirs[2].join(n)).unwrap(), "{n:?}");
    }
}

#[test]
fn seed_flag_changes_the_noise() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["simulate", sc.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["simulate", sc.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(std::fs::read(a.join("clean.mat")).unwrap(), std::fs::read(b.join("clean.mat")).unwrap());
    assert_ne!(std::fs::read(a.join("data.mat")).unwrap(), std::fs::read(b.join("data.mat")).unwrap());
}

#[test]
fn fom_inversion_trace_ends_below_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    run_ok(&["invert", sc.to_str().unwrap(), "--mode", "fom", "--out", out.to_str().unwrap()]);
    let kv = key_values(&out.join("fom_summary.csv"));
    assert_eq!(kv["stopped_by"], "noise");
    let noise: f64 = kv["noise_norm"].parse().unwrap();
    let rows = csv_rows(&out.join("fom_trace.csv"));
    let last = rows.iter().rev().find(|r| r[0] == "fom" && r[7] == "true").unwrap();
    let res: f64 = last[3].parse().unwrap();
    assert!(res <= 1.1 * noise, "{res} > 1.1 * {noise}");
    let params = csv_rows(&out.join("fom_params.csv"));
    assert_eq!(params.len(), 4);
    assert_eq!(params[0].len(), 5);
}

#[test]
fn build_rows_show_the_sketch_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    for mode in ["rom-rand", "rom-full"] {
        run_ok(&["invert", sc.to_str().unwrap(), "--mode", mode, "--out", out.to_str().unwrap()]);
    }
    let build = |mode: &str| -> u64 {
        let rows = csv_rows(&out.join(format!("{mode}_ledger.csv")));
        rows.iter().find(|r| r[0] == format!("{mode}/build")).unwrap()[1].parse().unwrap()
    };
    let (full, rand) = (build("rom-full"), build("rom-rand"));
    // (l_s + l_d) / (n_s + n_d) = 4 / 7
    assert_eq!(rand * 7, full * 4);
    assert!(out.join("rom-full_basis.mat").exists());
    assert!(out.join("rom-rand_recovered.pgm").exists());
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = romdot(&["invert", sc.to_str().unwrap(), "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = write_scenario(dir.path(), &MINIMAL.replace("\"omegas\"", "\"omega\""));
    let out = romdot(&["simulate", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line") && err.contains("omega"), "{err}");

    let out = romdot(&["diagnose", sc.to_str().unwrap(), "--which", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnose_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    for which in ["eig", "svd", "angles", "smw"] {
        run_ok(&["diagnose", sc.to_str().unwrap(), "--which", which, "--out", o]);
    }
    let eig = csv_rows(&out.join("eig.csv"));
    assert_eq!(eig.len(), 49);
    assert!(eig.iter().all(|r| r[3].parse::<f64>().unwrap() <= 1e-10));

    let svd = csv_rows(&out.join("svd.csv"));
    let sigma: Vec<f64> = svd.iter().filter(|r| !r[1].is_empty()).map(|r| r[1].parse().unwrap()).collect();
    assert!(sigma.windows(2).all(|w| w[0] >= w[1]));

    let cos: Vec<f64> = csv_rows(&out.join("angles.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(!cos.is_empty());
    assert!(cos.iter().all(|&c| (0.0..=1.0).contains(&c)));
    assert!(cos.windows(2).all(|w| w[0] >= w[1]));

    let smw = key_values(&out.join("smw.csv"));
    assert!(smw["containment_residual"].parse::<f64>().unwrap() <= 1e-10);
}

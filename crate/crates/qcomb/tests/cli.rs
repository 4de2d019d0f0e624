use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qcomb::config::{LabelRange, PipelineConfig};
use qcomb::io;

const SUBCOMMANDS: [&str; 10] = [
    "calibrate",
    "reconstruct",
    "project",
    "nullifier",
    "scan",
    "scan-ellipse",
    "simulate",
    "sweep",
    "synth",
    "pipeline",
];

fn qcomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcomb")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = PipelineConfig {
        label_range: Some(LabelRange { start: -5, end: 5, step: 1 }),
        n_samples: 20_000,
        ..Default::default()
    };
    let p = dir.join("small.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_on_every_subcommand_exits_zero() {
    ok(&qcomb(&["--help"]));
    for sub in SUBCOMMANDS {
        let out = qcomb(&[sub, "--help"]);
        ok(&out);
        assert!(!out.stdout.is_empty(), "{sub} printed no help");
    }
}

#[test]
fn subcommands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let base = ["--config", s(&cfg), "--output-dir", s(dir.path())];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let out = qcomb(&args);
        ok(&out);
    };
    run(&["simulate", "--steady"]);
    run(&["synth", "--v", s(&dir.path().join("vsim.csv")), "--n", "5000", "--seed", "7"]);
    run(&["reconstruct", "--meas", s(&dir.path().join("meas.csv")), "--meas0", s(&dir.path().join("meas0.csv"))]);
    run(&["project", "--vq", s(&dir.path().join("vquant.csv")), "--sigma", s(&dir.path().join("sigma.csv"))]);
    let vphys = dir.path().join("vphys.csv");
    run(&["scan", "--v", s(&vphys), "--grid", "0:pi:50"]);
    run(&["nullifier", "--v", s(&vphys), "--sigma", s(&dir.path().join("sigma.csv")), "--theta", "pi/4"]);
    run(&["scan-ellipse", "--v", s(&dir.path().join("vsim.csv")), "--i", "-3", "--j", "3", "--grid", "0:pi:20"]);

    for f in ["vsim.csv", "meas.csv", "meas0.csv", "vquant.csv", "sigma.csv", "vphys.csv", "scan.csv", "ellipse.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.starts_with("# config-hash: "), "{f} lacks the hash header");
    }
    let (labels, m) = io::read_matrix(&dir.path().join("vquant.csv")).unwrap();
    assert_eq!((labels.len(), m.nrows()), (11, 22));
    let proj: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("projection.json")).unwrap()).unwrap();
    assert!(proj["min_eig"].as_f64().unwrap() >= -1e-8);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("nullifier.json")).unwrap()).unwrap();
    assert_eq!(report["nodes"].as_array().unwrap().len(), 11);
    let scan = std::fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert_eq!(scan.lines().count(), 2 + 50);
    let ellipse = std::fs::read_to_string(dir.path().join("ellipse.csv")).unwrap();
    assert!(ellipse.lines().nth(1).unwrap() == "theta,eig_min,eig_max,db_min,db_max");
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&qcomb(&["--config", s(&cfg), "--output-dir", s(out), "--seed", "11", "pipeline"]));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in &names {
        assert!(std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let c = dir.path().join("c");
    ok(&qcomb(&["--config", s(&cfg), "--output-dir", s(&c), "--seed", "12", "pipeline"]));
    assert!(std::fs::read(a.join("vmeas.csv")).unwrap() != std::fs::read(c.join("vmeas.csv")).unwrap());
}

#[test]
fn bundled_three_pump_pipeline_reports_squeezing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/three_pump.json");
    ok(&qcomb(&["--config", cfg, "--output-dir", s(dir.path()), "pipeline"]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let mean_db = summary["mean_db"].as_f64().unwrap();
    println!("bundled pipeline mean nullifier dB {mean_db:.4}");
    assert!(mean_db < 0.0);
    assert_eq!(summary["n_modes"], 95);
}

#[test]
fn calibrate_recovers_exact_parameters() {
    use qcomb_core::calibration::{voltage_variance_model, NoiseSweep};
    let dir = tempfile::tempdir().unwrap();
    let freqs = vec![4.0e9, 4.5e9];
    let temps = vec![0.01, 0.03, 0.06, 0.1, 0.2];
    let (g, n) = ([90.0, 110.0], [3.0, 6.0]);
    let var = nalgebra::DMatrix::from_fn(temps.len(), freqs.len(), |r, c| {
        voltage_variance_model(g[c], n[c], freqs[c], temps[r], 1e5, 50.0).unwrap()
    });
    let sweep = NoiseSweep::new(freqs, temps, var, None).unwrap();
    let sp = dir.path().join("sweep.csv");
    io::write_sweep(&sp, "x", &sweep).unwrap();
    ok(&qcomb(&["--output-dir", s(dir.path()), "calibrate", "--sweep", s(&sp), "--bandwidth", "1e5", "--impedance", "50"]));
    let cal = io::read_cal(&dir.path().join("cal.csv")).unwrap();
    for (k, r) in cal.records().iter().enumerate() {
        assert!((r.gain / g[k] - 1.0).abs() < 1e-9);
        assert!((r.nbar / n[k] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        labels: Some(vec![-1, 1]),
        label_range: None,
        pumps: vec![qcomb::config::PumpSpec { offset_units: 0, amplitude: 1.0, phase: 0.0 }],
        ..Default::default()
    };
    let p = dir.path().join("two.json");
    std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&qcomb(&["--config", s(&p), "--output-dir", s(dir.path()), "sweep", "--g", "0.1:1.5:6", "--gamma", "0,6.283e7"]));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "g,gamma,db_min,db_max,theta,flagged");
    assert_eq!(lines.len(), 2 + 12);
    let first: Vec<f64> = lines[2].split(',').map(|x| x.parse().unwrap()).collect();
    assert!(first[2] < 0.0 && first[3] > 0.0);
}

#[test]
fn failures_exit_with_json_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"omega0_hz": -1}"#).unwrap();
    let out = qcomb(&["--config", s(&bad), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");

    // Far above threshold the steady state does not exist.
    let cfg = PipelineConfig {
        labels: Some(vec![-1, 1]),
        label_range: None,
        pumps: vec![qcomb::config::PumpSpec { offset_units: 0, amplitude: 50.0, phase: 0.0 }],
        ..Default::default()
    };
    let p = dir.path().join("hot.json");
    std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = qcomb(&["--config", s(&p), "--output-dir", s(dir.path()), "simulate", "--steady"]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "numerical");

    let out = qcomb(&["scan", "--v", s(&dir.path().join("missing.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

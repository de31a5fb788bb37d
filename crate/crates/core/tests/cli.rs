use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn weakiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakiv")).args(args).output().expect("binary runs")
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

fn load_schema(name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(schema_dir().join(name)).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, instance: &Value) {
    let manifest = load_schema("manifest.schema.json");
    let id = manifest["$id"].as_str().unwrap().to_string();
    let validator = jsonschema::options()
        .with_resource(id, jsonschema::Resource::from_contents(manifest).unwrap())
        .build(&load_schema(schema_name))
        .unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Heteroskedastic n = 80 dataset with an intercept in y and x.
fn write_dataset(dir: &Path) -> PathBuf {
    let mut s = String::from("y,x,z1,z2,z3\n");
    for i in 0..80 {
        let t = i as f64;
        let z = [(0.37 * t).sin() * 1.5, (0.91 * t + 1.0).cos(), ((1.73 * t).sin() * 3.0).fract()];
        let v = (2.3 * t + 0.2).sin() * 0.8;
        let u = 0.5 * v + (5.1 * t).cos() * (0.5 + z[0].abs()) * 0.4;
        let x = 0.3 + 0.6 * z[0] + 0.4 * z[1] + 0.3 * z[2] + v;
        let y = 1.0 + 0.7 * x + u;
        s.push_str(&format!("{y},{x},{},{},{}\n", z[0], z[1], z[2]));
    }
    let path = dir.join("data.csv");
    fs::write(&path, s).unwrap();
    path
}

const DATA_ARGS: [&str; 8] = ["--y", "y", "--x", "x", "--z", "z1,z2,z3", "--exog", "const"];

#[test]
fn estimate_output_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    for method in ["2sls", "liml", "kclass:0.5", "gmm2"] {
        let mut args = vec!["estimate", "--data", data.to_str().unwrap(), "--method", method];
        args.extend(DATA_ARGS);
        let v = stdout_json(&weakiv(&args));
        assert_valid("estimate.schema.json", &v);
        assert_eq!(v["result"]["n"], 80);
    }
}

#[test]
fn test_output_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let mut args = vec![
        "test",
        "--data",
        data.to_str().unwrap(),
        "--tests",
        "j,kp,score-2sls,score-liml,sargan,feff",
        "--cov",
        "nw:2",
    ];
    args.extend(DATA_ARGS);
    let v = stdout_json(&weakiv(&args));
    assert_valid("test_result.schema.json", &v);
    let results = v["result"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    // J equals the robust score test on the 2SLS residuals
    let j = results[0]["statistic"].as_f64().unwrap();
    let s = results[2]["statistic"].as_f64().unwrap();
    assert!((j - s).abs() <= 1e-8 * j.max(1.0), "{j} vs {s}");
}

#[test]
fn simulate_writes_summaries_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, threads: &str| {
        let o = weakiv(&[
            "--threads",
            threads,
            "simulate",
            "--design",
            "1:0.5",
            "--kz",
            "2",
            "--rho",
            "0.95",
            "--mu2",
            "8,4",
            "--reps",
            "300",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, "1");
    run(&b, "3");
    let csv_a = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(csv_a, fs::read_to_string(b.join("summary.csv")).unwrap());
    let rows: Vec<&str> = csv_a.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",4,") && rows[2].contains(",8,"), "{csv_a}");

    for mu2 in ["4", "8"] {
        let v: Value =
            serde_json::from_str(&fs::read_to_string(a.join(format!("summary_mu2_{mu2}.json"))).unwrap()).unwrap();
        assert_valid("simulation_summary.schema.json", &v);
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_valid("manifest.schema.json", &m);
    assert_eq!(m["seed"], 11);
}

#[test]
fn power_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = weakiv(&[
        "simulate",
        "--design",
        "power:0.5,0",
        "--kz",
        "2",
        "--rho",
        "0.5",
        "--mu2",
        "48",
        "--reps",
        "200",
        "--omega-grid",
        "0,0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("power.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1][2] > rows[0][2] && rows[1][3] > rows[0][3], "{text}");
}

#[test]
fn limit_output_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = weakiv(&[
        "limit",
        "--design",
        "1:0.5",
        "--kz",
        "2",
        "--rho",
        "0.95",
        "--mu2",
        "4",
        "--draws",
        "2000",
        "--level",
        "0.05",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("limit.json")).unwrap()).unwrap();
    assert_valid("limit.schema.json", &v);
    assert_eq!(v["draws"], 2000);
}

#[test]
fn eis_report_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("date,dc,r,z_nominal_rate,z_inflation,z_dc_lag,z_dp\n");
    for i in 0..60 {
        let t = i as f64;
        let z = [(0.41 * t).sin(), (0.83 * t + 0.5).cos(), (1.37 * t).sin() * 0.5, (0.19 * t).cos()];
        let r = 0.5 * z[0] + 0.3 * z[1] + 0.2 * z[3] + (2.9 * t).sin() * 0.3;
        let dc = 0.2 * r + (4.3 * t).cos() * 0.2;
        s.push_str(&format!("{}Q{},{dc},{r},{},{},{},{}\n", 1970 + i / 4, i % 4 + 1, z[0], z[1], z[2], z[3]));
    }
    fs::write(dir.path().join("aus.csv"), s).unwrap();
    let out = dir.path().join("out");
    let o = weakiv(&[
        "eis",
        "--data",
        dir.path().join("aus.csv").to_str().unwrap(),
        "--schema",
        "yogo",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("eis.json")).unwrap()).unwrap();
    assert_valid("eis.schema.json", &v);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["country"], "AUS");
    // KP is invariant to the normalization
    let (a, b) = (rows[0]["kp_stat"].as_f64().unwrap(), rows[1]["kp_stat"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-8 * a.max(1.0), "{a} vs {b}");
    assert!(fs::read_to_string(out.join("eis.csv")).unwrap().lines().count() == 3);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("o");

    // usage and configuration errors
    assert_eq!(weakiv(&["estimate"]).status.code(), Some(2));
    let bad_design = weakiv(&[
        "simulate",
        "--design",
        "7:1",
        "--kz",
        "2",
        "--rho",
        "0.5",
        "--mu2",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad_design.status.code(), Some(2));
    let bad_kz = weakiv(&[
        "simulate",
        "--design",
        "1:1",
        "--kz",
        "1",
        "--rho",
        "0.5",
        "--mu2",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad_kz.status.code(), Some(2));

    // data errors
    let mut args = vec!["estimate", "--data", "/nonexistent/data.csv"];
    args.extend(DATA_ARGS);
    assert_eq!(weakiv(&args).status.code(), Some(3));
    let mut args = vec!["estimate", "--data", data.to_str().unwrap(), "--y", "y", "--x", "x", "--z", "z1,missing"];
    args.push("--exog");
    args.push("const");
    assert_eq!(weakiv(&args).status.code(), Some(3));

    // rank-deficient instruments
    let dup = dir.path().join("dup.csv");
    let text = fs::read_to_string(&data).unwrap();
    let dup_text: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                "y,x,z1,z2\n".to_string()
            } else {
                let c: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}\n", c[0], c[1], c[2], c[2])
            }
        })
        .collect();
    fs::write(&dup, dup_text).unwrap();
    let o = weakiv(&["estimate", "--data", dup.to_str().unwrap(), "--y", "y", "--x", "x", "--z", "z1,z2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn help_exits_cleanly() {
    let o = weakiv(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate"));
}

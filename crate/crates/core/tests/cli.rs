use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use harnack_lab::{GridFunction, Lattice};
use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harnack-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_solution(path: &Path) -> GridFunction {
    GridFunction::read_table(std::io::BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn laplace_reproduces_linear_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1, "command": "solve",
        "operator": { "family": "discrete", "spacing": 0.0625, "constant": 1.0 },
        "boundary": { "kind": "field", "field": { "kind": "linear", "coeffs": [1.0, 0.0] } }
    });
    let c = write_config(dir.path(), "c.json", &cfg);
    let out = run(dir.path(), &["solve", "--config", &c, "--out", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let u = read_solution(&dir.path().join("o/solution.txt"));
    let l = u.lattice().clone();
    for i in 0..l.len() {
        assert!((u.value(i) - l.point(i)[0]).abs() <= 1e-10);
    }
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("o/solve_report.json")).unwrap()).unwrap();
    assert!(report["report"]["iterations"].as_u64().is_some());
    assert!(report["runtime_s"].is_null());
}

#[test]
fn nonlocal_solve_meets_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1, "command": "solve", "seed": 2,
        "operator": { "family": "nonlocal", "spacing": 0.125, "sigma": 1.5 },
        "solver": { "tol": 1e-9 }
    });
    let c = write_config(dir.path(), "c.json", &cfg);
    let out = run(dir.path(), &["solve", "--config", &c, "--out", "o", "--timings"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("o/solve_report.json")).unwrap()).unwrap();
    assert!(report["report"]["error_estimate"].as_f64().unwrap() < 1e-9);
    assert!(report["runtime_s"].as_f64().is_some());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_sigma = json!({
        "schema_version": 1, "command": "solve",
        "operator": { "family": "nonlocal", "spacing": 0.125, "sigma": 2.5 }
    });
    let c = write_config(dir.path(), "sigma.json", &bad_sigma);
    let out = run(dir.path(), &["solve", "--config", &c, "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("σ must lie in (0,2)"));

    let unknown = json!({ "schema_version": 1, "command": "solve", "operatr": {} });
    let c = write_config(dir.path(), "unknown.json", &unknown);
    let out = run(dir.path(), &["validate", "--config", &c]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("unknown field") && msg.contains("line"), "{msg}");

    let version = json!({ "schema_version": 2, "command": "solve" });
    let c = write_config(dir.path(), "version.json", &version);
    assert_eq!(run(dir.path(), &["validate", "--config", &c]).status.code(), Some(2));

    let good = json!({
        "schema_version": 1, "command": "solve",
        "operator": { "family": "discrete", "spacing": 0.25 }
    });
    let c = write_config(dir.path(), "good.json", &good);
    let out = run(dir.path(), &["validate", "--config", &c]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!dir.path().join("o").exists());
}

fn check_config(lambda: f64, r: f64, defs: &[&str]) -> Value {
    json!({
        "schema_version": 1, "command": "check",
        "operator": { "family": "discrete", "spacing": 0.0625 },
        "classes": {
            "definitions": defs,
            "params": { "lambda": lambda, "a_lo": 1.0, "a_hi": 1.0, "r": r, "rho": r }
        }
    })
}

#[test]
fn check_zero_and_self_touching() {
    let dir = tempfile::tempdir().unwrap();
    let l = Lattice::centered(2, 0.0625, 1.0).unwrap();
    let zero = GridFunction::constant(&l, 0.0).unwrap();
    fs::write(dir.path().join("zero.txt"), zero.to_table_string()).unwrap();
    let c = write_config(dir.path(), "c.json", &check_config(5.0, 0.25, &["2.1"]));
    let out = run(dir.path(), &["check", "--config", &c, "--solution", "zero.txt", "--out", "z"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_slice(&fs::read(dir.path().join("z/report_2.1.json")).unwrap()).unwrap();
    assert_eq!(rep["pass"], json!(true));

    // u = P_Lambda itself is touched by the polynomial at every center
    let touching = GridFunction::from_fn(&l, |p| 2.5 * p[0] * p[0] - 0.5 * (p[0] * p[0] + p[1] * p[1])).unwrap();
    fs::write(dir.path().join("p.txt"), touching.to_table_string()).unwrap();
    let out = run(dir.path(), &["check", "--config", &c, "--solution", "p.txt", "--out", "p"]);
    assert_eq!(out.status.code(), Some(1));
    let rep: Value = serde_json::from_slice(&fs::read(dir.path().join("p/report_2.1.json")).unwrap()).unwrap();
    assert!(rep["witness_count"].as_u64().unwrap() >= 1);
}

#[test]
fn check_grid_mismatch_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let l = Lattice::centered(2, 0.125, 1.0).unwrap();
    fs::write(dir.path().join("u.txt"), GridFunction::constant(&l, 0.0).unwrap().to_table_string()).unwrap();
    let c = write_config(dir.path(), "c.json", &check_config(5.0, 0.25, &["2.1"]));
    let out = run(dir.path(), &["check", "--config", &c, "--solution", "u.txt", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(dir.path().join("bad.txt"), "# dim=2 h=0.0625 box=[-1,1]x[-1,1]\n0 0 nope\n").unwrap();
    let out = run(dir.path(), &["check", "--config", &c, "--solution", "bad.txt", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn solved_instance_is_in_both_classes() {
    let dir = tempfile::tempdir().unwrap();
    let solve = json!({
        "schema_version": 1, "command": "solve", "seed": 4,
        "operator": { "family": "discrete", "spacing": 0.0625 }
    });
    let c = write_config(dir.path(), "s.json", &solve);
    assert_eq!(run(dir.path(), &["solve", "--config", &c, "--out", "s"]).status.code(), Some(0));
    let c = write_config(dir.path(), "c.json", &check_config(24.2, 0.125, &["2.1", "2.2"]));
    let out = run(dir.path(), &["check", "--config", &c, "--solution", "s/solution.txt", "--out", "c"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("c/report_2.1.json").exists());
    assert!(dir.path().join("c/report_2.2.json").exists());
}

#[test]
fn weak_harnack_on_zero_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1, "command": "experiment",
        "experiment": {
            "kind": "weak_harnack",
            "source": { "kind": "field", "dim": 2, "spacing": 0.0625, "field": { "kind": "zero" } },
            "threshold": 0.0
        }
    });
    let c = write_config(dir.path(), "c.json", &cfg);
    let out = run(dir.path(), &["experiment", "--config", &c, "--out", "o"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("o/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let rep: Value = serde_json::from_slice(&fs::read(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(rep["measured"]["fraction"], json!(1.0));
}

#[test]
fn sigma_sweep_table_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1, "command": "experiment", "seed": 1,
        "experiment": {
            "kind": "sigma_sweep",
            "template": {
                "spacing": 0.125,
                "kernel": { "sigma": 1.5, "lambda_min": 1.0, "lambda_max": 2.0, "anisotropy": 0.2,
                            "modulation": { "kind": "random", "seed": 0 } }
            },
            "values": [1.5, 1.7, 1.9, 1.95]
        }
    });
    let c = write_config(dir.path(), "c.json", &cfg);
    let a = run(dir.path(), &["experiment", "--config", &c, "--out", "a", "--jobs", "1"]);
    let b = run(dir.path(), &["experiment", "--config", &c, "--out", "b", "--jobs", "4"]);
    assert!(matches!(a.status.code(), Some(0 | 1)));
    let csv = fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma,exponent,K,runtime_s");
    assert_eq!(lines.len(), 5);
    assert_eq!(b.status.code(), a.status.code());
    for f in ["report.csv", "report.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

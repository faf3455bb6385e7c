mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::model_h;
use lqlp::constraints::read_rows_csv;
use lqlp::dataset::Dataset;
use lqlp::lqsystem::ControlProblem;
use nalgebra::DVector;

fn lqlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqlp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

fn explore(env: &Env, cfg: &Path, len: usize, out: &str) -> Output {
    lqlp(&[
        "explore",
        "--config",
        s(cfg),
        "--length",
        &len.to_string(),
        "--out",
        s(&env.path(out)),
    ])
}

#[test]
fn explore_reports_rank_condition() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 1\n");
    let long = explore(&env, &cfg, 5, "long.csv");
    assert!(long.status.success());
    assert!(stdout(&long).contains("rank condition: true"));
    let ds = Dataset::read_csv(std::fs::File::open(env.path("long.csv")).unwrap()).unwrap();
    assert_eq!(ds.len(), 5);
    assert!(env.path("long.csv.manifest.json").exists());

    let short = explore(&env, &cfg, 2, "short.csv");
    assert!(short.status.success());
    assert!(stdout(&short).contains("rank condition: false"));
}

#[test]
fn missing_config_fails_without_outputs() {
    let env = Env::new();
    let out = env.path("data.csv");
    let o = lqlp(&["explore", "--config", s(&env.path("nope.toml")), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(!out.exists());
    assert!(!env.path("data.csv.manifest.json").exists());
}

#[test]
fn same_seed_same_bytes() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 9\n");
    assert!(explore(&env, &cfg, 20, "a.csv").status.success());
    assert!(explore(&env, &cfg, 20, "b.csv").status.success());
    assert_eq!(
        std::fs::read(env.path("a.csv")).unwrap(),
        std::fs::read(env.path("b.csv")).unwrap()
    );
    let other = env.config("d.toml", "seed = 10\n");
    assert!(explore(&env, &other, 20, "c.csv").status.success());
    assert_ne!(
        std::fs::read(env.path("a.csv")).unwrap(),
        std::fs::read(env.path("c.csv")).unwrap()
    );
}

#[test]
fn synthetic_rows_agree_with_the_model() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 2\n");
    assert!(explore(&env, &cfg, 10, "data.csv").status.success());
    let rows_path = env.path("rows.csv");
    let o = lqlp(&[
        "synth",
        "--config",
        s(&cfg),
        "--dataset",
        s(&env.path("data.csv")),
        "--count",
        "40",
        "--out",
        s(&rows_path),
    ]);
    assert!(o.status.success());
    let (n, rows) = read_rows_csv(std::fs::File::open(&rows_path).unwrap()).unwrap();
    assert_eq!((n, rows.len()), (2, 40));
    // Every row synthesized from exact data is a true Bellman inequality, so
    // the optimal value satisfies it, and its coefficient matrix has the
    // `xxᵀ − γyyᵀ` shape: at most one eigenvalue of each sign.
    let star = ControlProblem::reference(0.95)
        .unwrap()
        .solve_are(Default::default())
        .unwrap()
        .value
        .p;
    for row in &rows {
        assert_eq!(row.provenance.to_string(), "synthetic");
        let h = row.coeffs.to_matrix();
        let lhs = row.lhs(&star);
        assert!(lhs <= row.rhs + 1e-9 * row.rhs.max(1.0), "{lhs} > {}", row.rhs);
        let eig = h.clone().symmetric_eigen().eigenvalues;
        let tol = 1e-9 * h.amax().max(1.0);
        assert!(eig.iter().filter(|&&e| e > tol).count() <= 1);
        assert!(eig.iter().filter(|&&e| e < -tol).count() <= 1);
    }
    // A unit weight on one sample reproduces that sample's model matrix.
    let ds = Dataset::read_csv(std::fs::File::open(env.path("data.csv")).unwrap()).unwrap();
    let p = ControlProblem::reference(0.95).unwrap();
    let (x, u, _) = ds.column(3);
    let alpha = DVector::from_fn(ds.len(), |k, _| if k == 3 { 1.0 } else { 0.0 });
    let h = lqlp::constraints::synth_h(&ds, &alpha, 0.95).unwrap();
    assert!((h - model_h(p.a(), p.b(), 0.95, &x, &u)).amax() <= 1e-9);
}

#[test]
fn zero_synthetic_rows_is_header_only() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 2\n");
    assert!(explore(&env, &cfg, 10, "data.csv").status.success());
    let rows_path = env.path("rows.csv");
    let o = lqlp(&[
        "synth",
        "--config",
        s(&cfg),
        "--dataset",
        s(&env.path("data.csv")),
        "--count",
        "0",
        "--out",
        s(&rows_path),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&rows_path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("c_1_1,c_1_2,c_2_2,rhs,provenance"));
}

#[test]
fn rank_deficient_dataset_is_a_numerical_error() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 2\n");
    assert!(explore(&env, &cfg, 2, "data.csv").status.success());
    let o = lqlp(&[
        "synth",
        "--config",
        s(&cfg),
        "--dataset",
        s(&env.path("data.csv")),
        "--out",
        s(&env.path("rows.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!env.path("rows.csv").exists());
}

#[test]
fn malformed_constraints_are_rejected() {
    let env = Env::new();
    let bad = env.config("bad.csv", "c_1_1,rhs,provenance\nnot-a-number,1,synthetic\n");
    let o = lqlp(&["solve", "--constraints", s(&bad), "--out", s(&env.path("sol.json"))]);
    assert!(!o.status.success());
    assert!(!env.path("sol.json").exists());
}

#[test]
fn unbounded_solve_reports_a_ray() {
    let env = Env::new();
    // A single row bounds P along one direction only.
    let rows = env.config("rows.csv", "c_1_1,c_1_2,c_2_2,rhs,provenance\n1,0,0,1,observed\n");
    let out = env.path("sol.json");
    let o = lqlp(&["solve", "--constraints", s(&rows), "--out", s(&out)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["status"], "unbounded");
    let ray: Vec<f64> = serde_json::from_value(v["ray"].clone()).unwrap();
    assert!(ray[0] <= 1e-12);
    assert!(ray[0] + ray[2] > 0.0);
}

#[test]
fn dense_synthetic_solve_is_accurate() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 4\n");
    assert!(explore(&env, &cfg, 10, "data.csv").status.success());
    let rows = env.path("rows.csv");
    let o = lqlp(&[
        "synth",
        "--config",
        s(&cfg),
        "--dataset",
        s(&env.path("data.csv")),
        "--count",
        "2000",
        "--out",
        s(&rows),
    ]);
    assert!(o.status.success());
    let out = env.path("sol.json");
    let o = lqlp(&[
        "solve",
        "--config",
        s(&cfg),
        "--constraints",
        s(&rows),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["status"], "optimal");
    assert!(v["gap"].as_f64().unwrap() < 1e-3);
    assert!(v["max_violation"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn stagecost_recovers_the_configured_cost() {
    let env = Env::new();
    let cfg = env.config(
        "c.toml",
        "seed = 3\n[problem]\nL = [[2.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 3.0]]\n",
    );
    assert!(explore(&env, &cfg, 10, "data.csv").status.success());
    let out = env.path("sc");
    let o = lqlp(&[
        "stagecost",
        "--config",
        s(&cfg),
        "--dataset",
        s(&env.path("data.csv")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("recovered.json")).unwrap()).unwrap();
    assert!(v["relative_error"].as_f64().unwrap() < 1e-9);
    let probes = std::fs::read_to_string(out.join("probes.csv")).unwrap();
    assert_eq!(probes.lines().count(), 1 + 6);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn fig2_stages_have_enough_active_rows() {
    let env = Env::new();
    let cfg = env.config("c.toml", "seed = 6\n");
    let out = env.path("fig2");
    let o = lqlp(&["fig2", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sols = std::fs::read_to_string(out.join("solutions.csv")).unwrap();
    let active = std::fs::read_to_string(out.join("active.csv")).unwrap();
    for line in sols.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if (f[0] == "first" || f[0] == "second") && f[2] == "optimal" {
            let count = active.lines().filter(|l| l.starts_with(&format!("{},", f[0]))).count();
            assert!(count >= 3, "{} stage has {count} active rows", f[0]);
        }
    }
}

#[test]
fn unknown_subcommand_and_help() {
    assert_eq!(lqlp(&["frobnicate"]).status.code(), Some(1));
    let help = lqlp(&["--help"]);
    assert!(help.status.success());
    assert!(stdout(&help).contains("stochastic"));
}

#[test]
fn fig1_default_config_is_quick() {
    let env = Env::new();
    let cfg = env.config("c.toml", "");
    let start = std::time::Instant::now();
    let o = lqlp(&["fig1", "--config", s(&cfg), "--out", s(&env.path("fig1"))]);
    assert!(o.status.success());
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let curve = std::fs::read_to_string(env.path("fig1").join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 51);
}

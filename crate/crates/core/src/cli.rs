//! Command-line front end. Each command computes all of its outputs in
//! memory, writes them, and then writes one manifest next to them, so a
//! failed run leaves no partial files behind.

use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::constraints::{read_rows_csv, synth_random_rows, write_rows_csv};
use crate::dataset::{collect_rollout, collect_targeted, excitation_order, random_inputs, random_vector, Dataset};
use crate::error::{Error, Result};
use crate::experiments::{
    fig1_experiment, fig2_experiment, pi_experiment, run_rng, status_str, stochastic_experiment, trace_gap,
};
use crate::linalg::{mat_to_rows, rel_frobenius};
use crate::lpsolve::{build_lp, extract_value, solve_lp, LpStatus, OffsetMode};
use crate::lqsystem::AreOptions;
use crate::stagecost::{
    build_l_xu, observe_probes, probe_requirements, read_observations_csv, select_square_basis, write_probes_csv,
};

#[derive(Debug, Parser)]
#[command(
    name = "lqlp",
    version,
    about = "Data-driven LP solutions of discounted LQ control problems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one exploration rollout and write it as a dataset CSV.
    Explore {
        #[command(flatten)]
        common: Common,
        /// Number of transitions (overrides `explore.length`).
        #[arg(long)]
        length: Option<usize>,
    },
    /// One transition from each configured state-input pair.
    Targeted {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize constraint rows from a dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV from `explore` or `targeted`.
        #[arg(long)]
        dataset: PathBuf,
        /// Rows to synthesize (overrides `synth.count`, default 100).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Reconstruct the stage cost from probe observations.
    Stagecost {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV supplying the basis.
        #[arg(long)]
        dataset: PathBuf,
        /// Probe CSV with a `cost` column; the configured cost is queried
        /// when omitted.
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Solve the LP over a constraint CSV.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Constraint CSV as written by `synth`.
        #[arg(long)]
        constraints: PathBuf,
        /// Treat the offset `e` as a decision variable.
        #[arg(long)]
        include_e: bool,
    },
    /// Optimality gap against constraint count.
    Fig1 {
        #[command(flatten)]
        common: Common,
        /// Independent runs (overrides `experiment.runs`).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Support constraints before and after adding synthetic rows.
    Fig2 {
        #[command(flatten)]
        common: Common,
    },
    /// Data-driven policy iteration.
    Pi {
        #[command(flatten)]
        common: Common,
    },
    /// Stochastic estimator comparison.
    Stochastic {
        #[command(flatten)]
        common: Common,
        /// Number of seeds (overrides `stochastic.seeds`).
        #[arg(long)]
        runs: Option<usize>,
    },
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub started: String,
    pub finished: String,
    pub version: String,
    pub details: serde_json::Value,
}

/// Output files gathered before anything touches the disk.
struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<(PathBuf, Vec<u8>)>,
    manifest: PathBuf,
}

impl Outputs {
    fn file(out: &Path) -> Self {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        Self {
            dir: None,
            files: Vec::new(),
            manifest: PathBuf::from(name),
        }
    }

    fn dir(out: &Path) -> Self {
        Self {
            dir: Some(out.to_path_buf()),
            files: Vec::new(),
            manifest: out.join("manifest.json"),
        }
    }

    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn commit(self, mut manifest: RunManifest) -> Result<()> {
        if let Some(d) = &self.dir {
            std::fs::create_dir_all(d)?;
        }
        for (p, bytes) in &self.files {
            std::fs::write(p, bytes)?;
        }
        manifest.outputs = self.files.iter().map(|(p, _)| p.display().to_string()).collect();
        manifest.finished = Utc::now().to_rfc3339();
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&self.manifest, text + "\n")?;
        Ok(())
    }
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

struct Ctx {
    config: Config,
    config_path: Option<String>,
    seed: u64,
    started: String,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let started = Utc::now().to_rfc3339();
        let config = match &common.config {
            Some(p) => Config::load(p).map_err(|e| match e {
                Error::Io(io) => Error::InvalidArgument(format!("cannot read config {}: {io}", p.display())),
                other => other,
            })?,
            None => Config::default(),
        };
        let seed = common.seed.unwrap_or_else(|| config.seed());
        Ok(Self {
            config,
            config_path: common.config.as_ref().map(|p| p.display().to_string()),
            seed,
            started,
        })
    }

    fn manifest(&self, command: &str, details: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.into(),
            config: self.config_path.clone(),
            seed: self.seed,
            outputs: Vec::new(),
            started: self.started.clone(),
            finished: String::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            details,
        }
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(std::fs::File::open(path)?)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explore { common, length } => explore(&common, length),
        Command::Targeted { common } => targeted(&common),
        Command::Synth { common, dataset, count } => synth(&common, &dataset, count),
        Command::Stagecost {
            common,
            dataset,
            observations,
        } => stagecost(&common, &dataset, observations.as_deref()),
        Command::Solve {
            common,
            constraints,
            include_e,
        } => solve(&common, &constraints, include_e),
        Command::Fig1 { common, runs } => fig1(&common, runs),
        Command::Fig2 { common } => fig2(&common),
        Command::Pi { common } => pi(&common),
        Command::Stochastic { common, runs } => stochastic(&common, runs),
    }
}

fn explore(common: &Common, length: Option<usize>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let problem = ctx.config.problem()?;
    let len = length.or(ctx.config.explore.length).unwrap_or(10);
    let episode = ctx.config.explore.episode_len.unwrap_or(len);
    if len == 0 || episode == 0 {
        return Err(Error::InvalidArgument("exploration length must be positive".into()));
    }
    let mut rng = run_rng(ctx.seed, 0);
    let mut parts = Vec::new();
    let mut inputs = Vec::with_capacity(len);
    let mut left = len;
    while left > 0 {
        let k = left.min(episode);
        let x0 = random_vector(problem.n(), &mut rng);
        let us = random_inputs(problem.m(), k, &mut rng);
        parts.push(collect_rollout(&problem, &x0, &us, &mut rng)?);
        inputs.extend(us);
        left -= k;
    }
    let ds = Dataset::merge(&parts)?;
    let order = excitation_order(&inputs, None);
    let rank_ok = ds.rank_condition(None);
    println!("transitions: {len}");
    println!("excitation order: {order}");
    println!("rank condition: {rank_ok}");
    let mut out = Outputs::file(&common.out);
    out.add(common.out.clone(), to_bytes(|b| ds.write_csv(b))?);
    out.commit(ctx.manifest(
        "explore",
        json!({ "transitions": len, "episode_len": episode, "excitation_order": order, "rank_condition": rank_ok }),
    ))
}

fn targeted(common: &Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let problem = ctx.config.problem()?;
    let (n, m) = (problem.n(), problem.m());
    let pairs = match &ctx.config.targeted.pairs {
        None => crate::dataset::basis_pairs(n, m),
        Some(list) => list
            .iter()
            .map(|z| {
                if z.len() != n + m {
                    return Err(Error::InvalidArgument(format!(
                        "targeted pair needs {} entries, got {}",
                        n + m,
                        z.len()
                    )));
                }
                Ok((DVector::from_column_slice(&z[..n]), DVector::from_column_slice(&z[n..])))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut rng = run_rng(ctx.seed, 0);
    let ds = collect_targeted(&problem, &pairs, &mut rng)?;
    let rank_ok = ds.rank_condition(None);
    println!("transitions: {}", ds.len());
    println!("rank condition: {rank_ok}");
    let mut out = Outputs::file(&common.out);
    out.add(common.out.clone(), to_bytes(|b| ds.write_csv(b))?);
    out.commit(ctx.manifest(
        "targeted",
        json!({ "transitions": ds.len(), "rank_condition": rank_ok }),
    ))
}

fn synth(common: &Common, dataset: &Path, count: Option<usize>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let problem = ctx.config.problem()?;
    let ds = read_dataset(dataset)?;
    if ds.n() != problem.n() || ds.m() != problem.m() {
        return Err(Error::shape(
            "dataset dimensions",
            format!("n={}, m={}", problem.n(), problem.m()),
            format!("n={}, m={}", ds.n(), ds.m()),
        ));
    }
    let count = count.or(ctx.config.synth.count).unwrap_or(100);
    let scale = ctx.config.synth.alpha_scale.unwrap_or(1.0);
    let mut rng = run_rng(ctx.seed, 0);
    let rows = synth_random_rows(&ds, problem.cost(), problem.gamma(), count, &mut rng, scale)?;
    println!("synthetic rows: {}", rows.len());
    let mut out = Outputs::file(&common.out);
    out.add(common.out.clone(), to_bytes(|b| write_rows_csv(&rows, problem.n(), b))?);
    out.commit(ctx.manifest(
        "synth",
        json!({ "dataset": dataset.display().to_string(), "count": count, "alpha_scale": scale }),
    ))
}

fn stagecost(common: &Common, dataset: &Path, observations: Option<&Path>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let problem = ctx.config.problem()?;
    let ds = read_dataset(dataset)?;
    let basis = select_square_basis(&ds, None)?;
    let probes = probe_requirements(&basis);
    let obs = match observations {
        Some(p) => read_observations_csv(std::fs::File::open(p)?)?,
        None => observe_probes(&probes, problem.cost())?,
    };
    let rec = build_l_xu(&basis, &obs)?.recover_l()?;
    let l = rec.cost.matrix();
    let error =
        (l.shape() == problem.cost().matrix().shape()).then(|| rel_frobenius(l, problem.cost().matrix(), 1e-300));
    println!("probes: {}", probes.len());
    println!("condition number: {:e}", rec.condition);
    if rec.ill_conditioned {
        println!("warning: basis is ill-conditioned");
    }
    let report = json!({
        "L": mat_to_rows(l),
        "basis_columns": basis.columns(),
        "condition": rec.condition,
        "ill_conditioned": rec.ill_conditioned,
        "relative_error": error,
    });
    let mut out = Outputs::dir(&common.out);
    out.add(
        common.out.join("probes.csv"),
        to_bytes(|b| write_probes_csv(&probes, Some(&obs), b))?,
    );
    out.add(
        common.out.join("recovered.json"),
        (serde_json::to_string_pretty(&report)? + "\n").into_bytes(),
    );
    out.commit(ctx.manifest(
        "stagecost",
        json!({ "dataset": dataset.display().to_string(), "probes": probes.len() }),
    ))
}

fn solve(common: &Common, constraints: &Path, include_e: bool) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let (n, rows) = read_rows_csv(std::fs::File::open(constraints)?)?;
    let include_e = include_e || ctx.config.experiment.include_e.unwrap_or(false);
    let problem = ctx.config.problem()?;
    let offset = if include_e {
        OffsetMode::Free { gamma: problem.gamma() }
    } else {
        OffsetMode::Fixed
    };
    let inst = build_lp(&rows, n, offset)?;
    let sol = solve_lp(&inst, &ctx.config.lp_options())?;
    let truth = (common.config.is_some() && problem.n() == n)
        .then(|| problem.solve_are(AreOptions::default()))
        .transpose()?;
    let mut report = json!({
        "status": status_str(sol.status),
        "rows": rows.len(),
        "n": n,
        "include_e": include_e,
        "iterations": sol.iterations,
    });
    match sol.status {
        LpStatus::Optimal => {
            let v = extract_value(&sol, n, include_e)?;
            let active: Vec<_> = sol
                .active_set
                .iter()
                .map(|&i| json!({ "index": i, "provenance": inst.rows[i].provenance.map(|p| p.to_string()) }))
                .collect();
            report["objective"] = json!(sol.objective_value);
            report["P"] = json!(mat_to_rows(&v.p));
            report["e"] = json!(v.e);
            report["active"] = json!(active);
            report["max_violation"] = json!(sol.max_violation);
            if let Some(t) = &truth {
                report["gap"] = json!(trace_gap(&t.value.p, &v.p));
                report["frobenius_gap"] = json!(rel_frobenius(&v.p, &t.value.p, 1e-12));
            }
        }
        LpStatus::Unbounded => {
            report["ray"] = json!(sol.ray);
        }
    }
    println!("status: {}", status_str(sol.status));
    let mut out = Outputs::file(&common.out);
    out.add(
        common.out.clone(),
        (serde_json::to_string_pretty(&report)? + "\n").into_bytes(),
    );
    out.commit(ctx.manifest("solve", json!({ "constraints": constraints.display().to_string() })))
}

fn fig1(common: &Common, runs: Option<usize>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let mut cfg = ctx.config.experiment()?;
    cfg.seed = ctx.seed;
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    let curve = fig1_experiment(&cfg)?;
    let first = curve.summary.first().copied().unwrap_or(f64::NAN);
    let last = curve.summary.last().copied().unwrap_or(f64::NAN);
    println!(
        "median gap: {first:e} at {} rows, {last:e} at {} rows",
        curve.constraint_counts[0],
        curve.constraint_counts.last().unwrap()
    );
    let mut out = Outputs::dir(&common.out);
    out.add(common.out.join("curve.csv"), to_bytes(|b| curve.write_summary_csv(b))?);
    out.add(common.out.join("runs.csv"), to_bytes(|b| curve.write_runs_csv(b))?);
    out.commit(ctx.manifest(
        "fig1",
        json!({
            "problem": Config::problem_echo(&cfg.problem),
            "runs": cfg.runs,
            "n_observed": cfg.n_observed,
            "n_synthetic": cfg.n_synthetic,
            "batch": cfg.batch,
            "max_increase": curve.max_increase(),
            "min_relaxation_margin": curve.min_relaxation_margin(),
        }),
    ))
}

fn fig2(common: &Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let mut cfg = ctx.config.experiment()?;
    cfg.seed = ctx.seed;
    if ctx.config.experiment.n_synthetic.is_none() {
        cfg.n_synthetic = 10;
    }
    let rep = fig2_experiment(&cfg)?;
    for (name, s) in [("first", &rep.first), ("second", &rep.second)] {
        println!("{name}: {} rows, {}, gap {:e}", s.rows, status_str(s.status), s.gap);
    }
    let mut out = Outputs::dir(&common.out);
    out.add(
        common.out.join("solutions.csv"),
        to_bytes(|b| rep.write_solutions_csv(b))?,
    );
    out.add(common.out.join("active.csv"), to_bytes(|b| rep.write_active_csv(b))?);
    out.add(common.out.join("slices.csv"), to_bytes(|b| rep.write_slices_csv(b))?);
    out.commit(ctx.manifest(
        "fig2",
        json!({ "problem": Config::problem_echo(&cfg.problem), "n_observed": cfg.n_observed, "n_synthetic": cfg.n_synthetic }),
    ))
}

fn pi(common: &Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let mut cfg = ctx.config.experiment()?;
    cfg.seed = ctx.seed;
    let rep = pi_experiment(&cfg, None)?;
    let last = rep.steps.last().expect("initial step");
    println!(
        "iterations: {}, converged: {}, gain error {:e}",
        last.iteration, rep.converged, last.gain_error
    );
    if let Some(h) = &rep.halted {
        println!("halted: {h}");
    }
    let mut out = Outputs::dir(&common.out);
    out.add(common.out.join("iterations.csv"), to_bytes(|b| rep.write_csv(b))?);
    out.commit(ctx.manifest(
        "pi",
        json!({
            "problem": Config::problem_echo(&cfg.problem),
            "options": cfg.pi,
            "converged": rep.converged,
            "halted": rep.halted,
            "gain_star": mat_to_rows(&rep.gain_star.k),
        }),
    ))
}

fn stochastic(common: &Common, runs: Option<usize>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let mut cfg = ctx.config.experiment()?;
    cfg.seed = ctx.seed;
    if let Some(r) = runs {
        cfg.stochastic.seeds = r;
    }
    cfg.validate()?;
    if cfg.problem.is_deterministic() {
        println!("note: Sigma is zero, every estimator is exact");
    }
    let rep = stochastic_experiment(&cfg)?;
    let last = rep.policy_medians.last().copied().unwrap_or(f64::NAN);
    println!(
        "median gain error at N={}: {last:e} (baseline {:e})",
        rep.n_grid.last().unwrap_or(&0),
        rep.baseline_policy_error
    );
    let mut out = Outputs::dir(&common.out);
    out.add(common.out.join("errors.csv"), to_bytes(|b| rep.write_errors_csv(b))?);
    out.add(common.out.join("policy.csv"), to_bytes(|b| rep.write_policy_csv(b))?);
    out.commit(ctx.manifest(
        "stochastic",
        json!({
            "problem": Config::problem_echo(&cfg.problem),
            "options": cfg.stochastic,
            "policy_threshold": rep.threshold,
            "baseline_policy_error": rep.baseline_policy_error,
            "median_policy_error": last,
        }),
    ))
}

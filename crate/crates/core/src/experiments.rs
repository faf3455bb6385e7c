//! End-to-end pipelines against the Riccati ground truth: the sampled-LP
//! convergence curve, the support-constraint comparison, data-driven policy
//! iteration and the stochastic estimators.
//!
//! Every run draws from its own ChaCha stream derived from the base seed, so
//! results do not depend on how rayon schedules the runs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::{
    expected_g, h_matrix, make_row, observed_rows, outer_difference, reinit_average_g, synth_h, synth_policy_rows,
    synth_random_rows, ConstraintRow, CostOracle, Provenance,
};
use crate::dataset::{collect_rollout, random_inputs, random_vector, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{rel_frobenius, spectral_radius, sup_norm};
use crate::lpsolve::{build_lp, extract_value, solve_lp, LpInstance, LpStatus, OffsetMode, SolverOptions};
use crate::lqsystem::{AreOptions, ControlProblem, PolicyGain, QuadraticValue};

const GAP_FLOOR: f64 = 1e-12;
const MAX_RESAMPLES: usize = 100;

/// Relative trace gap `(tr P̂ − tr P*) / max(tr P*, 1e-12)`.
pub fn optimality_gap(problem: &ControlProblem, v_hat: &QuadraticValue) -> Result<f64> {
    let truth = problem.solve_are(AreOptions::default())?;
    Ok(trace_gap(&truth.value.p, &v_hat.p))
}

pub fn trace_gap(p_star: &DMatrix<f64>, p_hat: &DMatrix<f64>) -> f64 {
    let t = p_star.trace();
    (p_hat.trace() - t) / t.max(GAP_FLOOR)
}

/// Median with `+∞` sorting last; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 || v[k / 2].is_infinite() {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Rng for one run; streams keep runs independent of scheduling.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct PiOptions {
    pub iterations: usize,
    /// States sampled per iteration; `None` means `2(n+m)`.
    pub states_per_iter: Option<usize>,
    pub tol: f64,
}

impl Default for PiOptions {
    fn default() -> Self {
        Self {
            iterations: 20,
            states_per_iter: None,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StochasticOptions {
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    /// Groups for the averaged-dataset estimator.
    pub groups: usize,
    /// Synthetic rows built from each averaged dataset.
    pub constraints: usize,
    /// Standard deviation of samples around each group center.
    pub spread: f64,
    pub threshold: f64,
}

impl Default for StochasticOptions {
    fn default() -> Self {
        Self {
            n_grid: vec![100, 316, 1000, 3162, 10_000],
            seeds: 50,
            groups: 6,
            constraints: 1000,
            spread: 1.0,
            threshold: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ControlProblem,
    pub seed: u64,
    pub runs: usize,
    pub n_observed: usize,
    pub n_synthetic: usize,
    /// Exploration restarts from a fresh random state after this many steps.
    pub episode_len: usize,
    /// Synthetic rows added between consecutive LP solves.
    pub batch: usize,
    pub alpha_scale: f64,
    pub include_e: bool,
    pub lp: SolverOptions,
    pub pi: PiOptions,
    pub stochastic: StochasticOptions,
}

impl ExperimentConfig {
    pub fn new(problem: ControlProblem) -> Self {
        Self {
            problem,
            seed: 0,
            runs: 100,
            n_observed: 10,
            n_synthetic: 500,
            episode_len: 10,
            batch: 10,
            alpha_scale: 1.0,
            include_e: false,
            lp: SolverOptions::default(),
            pi: PiOptions::default(),
            stochastic: StochasticOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidArgument("runs must be at least 1".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidArgument("episode_len must be positive".into()));
        }
        if self.n_synthetic > 0 && self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.alpha_scale > 0.0) {
            return Err(Error::InvalidArgument("alpha_scale must be positive".into()));
        }
        let s = &self.stochastic;
        if s.groups == 0 || s.seeds == 0 || s.n_grid.contains(&0) {
            return Err(Error::InvalidArgument("stochastic counts must be positive".into()));
        }
        Ok(())
    }

    fn offset(&self) -> OffsetMode {
        if self.include_e {
            OffsetMode::Free {
                gamma: self.problem.gamma(),
            }
        } else {
            OffsetMode::Fixed
        }
    }
}

/// Rank-sufficient exploration data: `len` transitions in episodes of at
/// most `episode_len` steps, each from `x0 ~ N(0, I)` with i.i.d. normal
/// inputs. Redrawn while the rank condition fails.
pub fn explore_dataset<R: Rng + ?Sized>(
    problem: &ControlProblem,
    len: usize,
    episode_len: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if len == 0 || episode_len == 0 {
        return Err(Error::InvalidArgument("exploration length must be positive".into()));
    }
    let mut rank = 0;
    for attempt in 0..MAX_RESAMPLES {
        let mut parts = Vec::with_capacity(len.div_ceil(episode_len));
        let mut left = len;
        while left > 0 {
            let k = left.min(episode_len);
            let x0 = random_vector(problem.n(), rng);
            let inputs = random_inputs(problem.m(), k, rng);
            parts.push(collect_rollout(problem, &x0, &inputs, rng)?);
            left -= k;
        }
        let ds = Dataset::merge(&parts)?;
        if ds.rank_condition(None) {
            return Ok(ds);
        }
        rank = crate::linalg::numerical_rank(&ds.stacked(), None);
        log::debug!("exploration attempt {attempt} has rank {rank}, resampling");
    }
    Err(Error::RankDeficient {
        rank,
        required: problem.n() + problem.m(),
    })
}

fn lp_value(
    inst: &LpInstance,
    opts: &SolverOptions,
    n: usize,
    include_e: bool,
) -> Result<(LpStatus, f64, Option<QuadraticValue>)> {
    let sol = solve_lp(inst, opts)?;
    match sol.status {
        LpStatus::Optimal => Ok((
            sol.status,
            sol.objective_value,
            Some(extract_value(&sol, n, include_e)?),
        )),
        LpStatus::Unbounded => Ok((sol.status, f64::INFINITY, None)),
    }
}

/// Per-run and per-count optimality gaps.
#[derive(Debug, Clone)]
pub struct GapCurve {
    pub constraint_counts: Vec<usize>,
    /// `runs × counts`; `+∞` where the LP was unbounded.
    pub gaps: Vec<Vec<f64>>,
    pub frobenius_gaps: Vec<Vec<f64>>,
    pub objectives: Vec<Vec<f64>>,
    /// Median per count; unbounded runs are dropped only when they are the
    /// majority, which is flagged in `majority_unbounded`.
    pub summary: Vec<f64>,
    pub unbounded: Vec<usize>,
    pub majority_unbounded: Vec<bool>,
    pub trace_star: f64,
}

impl GapCurve {
    fn summarize(&mut self) {
        let runs = self.gaps.len();
        self.summary.clear();
        self.unbounded.clear();
        self.majority_unbounded.clear();
        for c in 0..self.constraint_counts.len() {
            let col: Vec<f64> = self.gaps.iter().map(|g| g[c]).collect();
            let unb = col.iter().filter(|g| g.is_infinite()).count();
            let majority = 2 * unb > runs;
            let med = if majority && unb < runs {
                let finite: Vec<f64> = col.iter().copied().filter(|g| g.is_finite()).collect();
                median(&finite)
            } else {
                median(&col)
            };
            self.summary.push(med);
            self.unbounded.push(unb);
            self.majority_unbounded.push(majority);
        }
    }

    /// Largest increase along any run's curve (`≤ 0` means monotone).
    pub fn max_increase(&self) -> f64 {
        self.gaps
            .iter()
            .flat_map(|g| {
                g.windows(2).map(|w| {
                    if w[0].is_infinite() {
                        f64::NEG_INFINITY
                    } else {
                        w[1] - w[0]
                    }
                })
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest `objective − tr(P*)` over every bounded solve.
    pub fn min_relaxation_margin(&self) -> f64 {
        self.objectives
            .iter()
            .flatten()
            .map(|o| o - self.trace_star)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["count", "median_gap", "unbounded_runs", "majority_unbounded"])?;
        for c in 0..self.constraint_counts.len() {
            wr.write_record([
                self.constraint_counts[c].to_string(),
                fmt(self.summary[c]),
                self.unbounded[c].to_string(),
                self.majority_unbounded[c].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["run", "count", "gap", "frobenius_gap", "objective"])?;
        for (r, g) in self.gaps.iter().enumerate() {
            for (c, count) in self.constraint_counts.iter().enumerate() {
                wr.write_record([
                    r.to_string(),
                    count.to_string(),
                    fmt(g[c]),
                    fmt(self.frobenius_gaps[r][c]),
                    fmt(self.objectives[r][c]),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Shortest round-tripping decimal form; `inf` for infinities.
pub(crate) fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:?}")
    }
}

struct RunCurve {
    gaps: Vec<f64>,
    frob: Vec<f64>,
    objectives: Vec<f64>,
}

fn fig1_run(cfg: &ExperimentConfig, p_star: &DMatrix<f64>, counts: &[usize], run: usize) -> Result<RunCurve> {
    let problem = &cfg.problem;
    let n = problem.n();
    let mut rng = run_rng(cfg.seed, run as u64);
    let ds = explore_dataset(problem, cfg.n_observed, cfg.episode_len, &mut rng)?;
    let cost = problem.cost();
    let observed = observed_rows(&ds, cost, problem.gamma())?;
    let synthetic = synth_random_rows(&ds, cost, problem.gamma(), cfg.n_synthetic, &mut rng, cfg.alpha_scale)?;
    let mut inst = build_lp(&observed, n, cfg.offset())?;
    let mut curve = RunCurve {
        gaps: Vec::with_capacity(counts.len()),
        frob: Vec::with_capacity(counts.len()),
        objectives: Vec::with_capacity(counts.len()),
    };
    let mut added = 0;
    for &count in counts {
        let upto = count - cfg.n_observed;
        inst.push_rows(&synthetic[added..upto])?;
        added = upto;
        let (_, obj, v) = lp_value(&inst, &cfg.lp, n, cfg.include_e)?;
        match v {
            Some(v) => {
                curve.gaps.push(trace_gap(p_star, &v.p));
                curve.frob.push(rel_frobenius(&v.p, p_star, GAP_FLOOR));
            }
            None => {
                curve.gaps.push(f64::INFINITY);
                curve.frob.push(f64::INFINITY);
            }
        }
        curve.objectives.push(obj);
    }
    Ok(curve)
}

/// Counts at which the LP is solved: the observed set, then one per batch.
pub fn constraint_counts(n_observed: usize, n_synthetic: usize, batch: usize) -> Vec<usize> {
    let mut counts = vec![n_observed];
    let mut s = 0;
    while s < n_synthetic {
        s = (s + batch).min(n_synthetic);
        counts.push(n_observed + s);
    }
    counts
}

/// Optimality gap versus constraint count over independent runs.
pub fn fig1_experiment(cfg: &ExperimentConfig) -> Result<GapCurve> {
    cfg.validate()?;
    if !cfg.problem.is_deterministic() {
        return Err(Error::InvalidArgument(
            "the gap curve needs a noise-free problem".into(),
        ));
    }
    let truth = cfg.problem.solve_are(AreOptions::default())?;
    let p_star = truth.value.p;
    let counts = constraint_counts(cfg.n_observed, cfg.n_synthetic, cfg.batch);
    let runs: Vec<RunCurve> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| fig1_run(cfg, &p_star, &counts, r))
        .collect::<Result<_>>()?;
    let mut curve = GapCurve {
        constraint_counts: counts,
        gaps: runs.iter().map(|r| r.gaps.clone()).collect(),
        frobenius_gaps: runs.iter().map(|r| r.frob.clone()).collect(),
        objectives: runs.into_iter().map(|r| r.objectives).collect(),
        summary: Vec::new(),
        unbounded: Vec::new(),
        majority_unbounded: Vec::new(),
        trace_star: p_star.trace(),
    };
    curve.summarize();
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct ActiveRow {
    pub index: usize,
    pub provenance: Option<Provenance>,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct StageSolution {
    pub rows: usize,
    pub status: LpStatus,
    pub objective: f64,
    pub value: Option<QuadraticValue>,
    pub gap: f64,
    pub active: Vec<ActiveRow>,
}

#[derive(Debug, Clone)]
pub struct SupportReport {
    pub first: StageSolution,
    pub second: StageSolution,
    pub p_star: DMatrix<f64>,
    /// Angles of the unit-circle states used for the value slices.
    pub angles: Vec<f64>,
}

fn stage(inst: &LpInstance, opts: &SolverOptions, p_star: &DMatrix<f64>, include_e: bool) -> Result<StageSolution> {
    let n = inst.n.expect("constraint-built instance");
    let sol = solve_lp(inst, opts)?;
    let (value, gap, objective) = match sol.status {
        LpStatus::Optimal => {
            let v = extract_value(&sol, n, include_e)?;
            let g = trace_gap(p_star, &v.p);
            (Some(v), g, sol.objective_value)
        }
        LpStatus::Unbounded => (None, f64::INFINITY, f64::INFINITY),
    };
    let active = match sol.status {
        LpStatus::Optimal => sol
            .active_set
            .iter()
            .map(|&i| ActiveRow {
                index: i,
                provenance: inst.rows[i].provenance,
                coeffs: inst.rows[i].coeffs.clone(),
                rhs: inst.rows[i].rhs,
            })
            .collect(),
        LpStatus::Unbounded => Vec::new(),
    };
    Ok(StageSolution {
        rows: inst.rows.len(),
        status: sol.status,
        objective,
        value,
        gap,
        active,
    })
}

/// LP on the observed rows, then again with `n_synthetic` synthetic rows.
pub fn fig2_experiment(cfg: &ExperimentConfig) -> Result<SupportReport> {
    cfg.validate()?;
    let problem = &cfg.problem;
    if problem.n() != 2 || !problem.is_deterministic() {
        return Err(Error::InvalidArgument(
            "support comparison needs a noise-free problem with n = 2".into(),
        ));
    }
    let p_star = problem.solve_are(AreOptions::default())?.value.p;
    let mut rng = run_rng(cfg.seed, 0);
    let ds = explore_dataset(problem, cfg.n_observed, cfg.episode_len, &mut rng)?;
    let observed = observed_rows(&ds, problem.cost(), problem.gamma())?;
    let synthetic = synth_random_rows(
        &ds,
        problem.cost(),
        problem.gamma(),
        cfg.n_synthetic,
        &mut rng,
        cfg.alpha_scale,
    )?;
    let mut inst = build_lp(&observed, 2, cfg.offset())?;
    let first = stage(&inst, &cfg.lp, &p_star, cfg.include_e)?;
    inst.push_rows(&synthetic)?;
    let second = stage(&inst, &cfg.lp, &p_star, cfg.include_e)?;
    let angles = (0..64).map(|k| std::f64::consts::TAU * k as f64 / 64.0).collect();
    Ok(SupportReport {
        first,
        second,
        p_star,
        angles,
    })
}

impl SupportReport {
    pub fn write_solutions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["stage", "rows", "status", "objective", "gap", "p11", "p12", "p22"])?;
        for (name, s) in [("first", &self.first), ("second", &self.second)] {
            let p = |i, j| s.value.as_ref().map_or(String::new(), |v| fmt(v.p[(i, j)]));
            wr.write_record([
                name.to_string(),
                s.rows.to_string(),
                status_str(s.status).to_string(),
                fmt(s.objective),
                fmt(s.gap),
                p(0, 0),
                p(0, 1),
                p(1, 1),
            ])?;
        }
        let p = &self.p_star;
        wr.write_record([
            "riccati".to_string(),
            String::new(),
            "optimal".to_string(),
            fmt(p.trace()),
            fmt(0.0),
            fmt(p[(0, 0)]),
            fmt(p[(0, 1)]),
            fmt(p[(1, 1)]),
        ])?;
        wr.flush()?;
        Ok(())
    }

    /// Active rows as planes `c11 p11 + c12 p12 + c22 p22 = rhs`.
    pub fn write_active_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        let mut header = vec!["stage".to_string(), "row".into(), "provenance".into()];
        let d = self
            .second
            .active
            .first()
            .or(self.first.active.first())
            .map_or(3, |a| a.coeffs.len());
        header.extend(["c11", "c12", "c22"].iter().map(|s| s.to_string()));
        if d > 3 {
            header.push("c_e".into());
        }
        header.push("rhs".into());
        wr.write_record(&header)?;
        for (name, s) in [("first", &self.first), ("second", &self.second)] {
            for a in &s.active {
                let mut rec = vec![
                    name.to_string(),
                    a.index.to_string(),
                    a.provenance.map_or(String::new(), |p| p.to_string()),
                ];
                rec.extend(a.coeffs.iter().map(|&c| fmt(c)));
                rec.push(fmt(a.rhs));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// `v(x) = xᵀPx` on the unit circle for both stages and the optimum.
    pub fn write_slices_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["angle", "x1", "x2", "v_first", "v_second", "v_star"])?;
        for &t in &self.angles {
            let x = DVector::from_column_slice(&[t.cos(), t.sin()]);
            let quad = |p: &DMatrix<f64>| (x.transpose() * p * &x)[(0, 0)];
            let v = |s: &StageSolution| s.value.as_ref().map_or(String::new(), |v| fmt(quad(&v.p)));
            wr.write_record([
                fmt(t),
                fmt(x[0]),
                fmt(x[1]),
                v(&self.first),
                v(&self.second),
                fmt(quad(&self.p_star)),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn status_str(s: LpStatus) -> &'static str {
    match s {
        LpStatus::Optimal => "optimal",
        LpStatus::Unbounded => "unbounded",
    }
}

#[derive(Debug, Clone)]
pub struct PiStep {
    pub iteration: usize,
    pub gain: PolicyGain,
    pub value: Option<QuadraticValue>,
    pub gap: f64,
    /// `‖K_t − K_{t−1}‖∞`; zero for the initial gain.
    pub gain_change: f64,
    pub gain_error: f64,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct PiReport {
    pub steps: Vec<PiStep>,
    pub converged: bool,
    /// Set when an intermediate gain was destabilizing or the LP unbounded.
    pub halted: Option<String>,
    pub gain_star: PolicyGain,
}

impl PiReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        let Some(first) = self.steps.first() else {
            return Ok(());
        };
        let (m, n) = first.gain.k.shape();
        let mut header = vec![
            "iteration".to_string(),
            "rows".into(),
            "gap".into(),
            "gain_change".into(),
            "gain_error".into(),
        ];
        for i in 0..m {
            for j in 0..n {
                header.push(format!("k_{}_{}", i + 1, j + 1));
            }
        }
        for i in 0..n {
            for j in i..n {
                header.push(format!("p_{}_{}", i + 1, j + 1));
            }
        }
        wr.write_record(&header)?;
        for s in &self.steps {
            let mut rec = vec![
                s.iteration.to_string(),
                s.rows.to_string(),
                fmt(s.gap),
                fmt(s.gain_change),
                fmt(s.gain_error),
            ];
            for i in 0..m {
                for j in 0..n {
                    rec.push(fmt(s.gain.k[(i, j)]));
                }
            }
            for i in 0..n {
                for j in i..n {
                    rec.push(s.value.as_ref().map_or(String::new(), |v| fmt(v.p[(i, j)])));
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = random_vector(dim, rng);
        let nrm = v.norm();
        if nrm > 1e-12 {
            return v / nrm;
        }
    }
}

fn is_stabilizing(problem: &ControlProblem, k: &PolicyGain) -> bool {
    problem.gamma().sqrt() * spectral_radius(&problem.closed_loop(k)) < 1.0
}

/// Data-driven policy iteration. Rows targeted at `(x, K_t x)` accumulate
/// across iterations on top of the observed rows.
pub fn pi_experiment(cfg: &ExperimentConfig, initial: Option<PolicyGain>) -> Result<PiReport> {
    cfg.validate()?;
    let problem = &cfg.problem;
    let (n, m) = (problem.n(), problem.m());
    let truth = problem.solve_are(AreOptions::default())?;
    let p_star = &truth.value.p;
    let k_star = truth.gain;
    let mut rng = run_rng(cfg.seed, 0);
    let ds = explore_dataset(problem, cfg.n_observed.max(n * (m + 1) + m), cfg.episode_len, &mut rng)?;
    let cost: &dyn CostOracle = problem.cost();
    let gamma = problem.gamma();
    let mut inst = build_lp(&observed_rows(&ds, cost, gamma)?, n, cfg.offset())?;
    let per_iter = cfg.pi.states_per_iter.unwrap_or(2 * (n + m));

    let (mut gain, mut value) = match initial {
        Some(k) => {
            if k.k.shape() != (m, n) {
                return Err(Error::shape(
                    "initial gain",
                    format!("{m}x{n}"),
                    format!("{:?}", k.k.shape()),
                ));
            }
            (k, None)
        }
        None => {
            // Preliminary solve; synthetic batches are added until bounded.
            let mut v = None;
            for _ in 0..MAX_RESAMPLES {
                if let (_, _, Some(val)) = lp_value(&inst, &cfg.lp, n, cfg.include_e)? {
                    v = Some(val);
                    break;
                }
                inst.push_rows(&synth_random_rows(
                    &ds,
                    cost,
                    gamma,
                    cfg.batch.max(1),
                    &mut rng,
                    cfg.alpha_scale,
                )?)?;
            }
            let v = v.ok_or_else(|| Error::Solver {
                iterations: MAX_RESAMPLES,
                message: "preliminary LP stayed unbounded".into(),
            })?;
            (problem.greedy_gain(&v)?, Some(v))
        }
    };
    let gap_of = |v: &Option<QuadraticValue>| v.as_ref().map_or(f64::INFINITY, |v| trace_gap(p_star, &v.p));
    let mut steps = vec![PiStep {
        iteration: 0,
        gain: gain.clone(),
        gap: gap_of(&value),
        value: value.clone(),
        gain_change: 0.0,
        gain_error: sup_norm(&(&gain.k - &k_star.k)),
        rows: inst.rows.len(),
    }];
    let mut converged = false;
    let mut halted = None;
    for t in 1..=cfg.pi.iterations {
        if !is_stabilizing(problem, &gain) {
            halted = Some(format!("gain at iteration {} is not stabilizing", t - 1));
            break;
        }
        let states: Vec<DVector<f64>> = (0..per_iter).map(|_| unit_sphere(n, &mut rng)).collect();
        inst.push_rows(&synth_policy_rows(&ds, &gain, &states, cost, gamma)?)?;
        let (_, _, v) = lp_value(&inst, &cfg.lp, n, cfg.include_e)?;
        let Some(v) = v else {
            halted = Some(format!("LP unbounded at iteration {t}"));
            break;
        };
        let next = problem.greedy_gain(&v)?;
        let change = sup_norm(&(&next.k - &gain.k));
        value = Some(v);
        gain = next;
        steps.push(PiStep {
            iteration: t,
            gain: gain.clone(),
            gap: gap_of(&value),
            value: value.clone(),
            gain_change: change,
            gain_error: sup_norm(&(&gain.k - &k_star.k)),
            rows: inst.rows.len(),
        });
        if change < cfg.pi.tol {
            converged = true;
            break;
        }
    }
    Ok(PiReport {
        steps,
        converged,
        halted,
        gain_star: k_star,
    })
}

/// Median errors of one estimator across seeds, per `N`.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorCurve {
    pub method: String,
    pub target: String,
    /// `seeds × grid`.
    pub errors: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
}

impl EstimatorCurve {
    fn new(method: &str, target: &str, errors: Vec<Vec<f64>>) -> Self {
        let g = errors.first().map_or(0, |e| e.len());
        let medians = (0..g)
            .map(|k| median(&errors.iter().map(|e| e[k]).collect::<Vec<_>>()))
            .collect();
        Self {
            method: method.into(),
            target: target.into(),
            errors,
            medians,
        }
    }

    /// Number of grid steps where the median goes up.
    pub fn inversions(&self) -> usize {
        self.medians.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StochasticReport {
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub curves: Vec<EstimatorCurve>,
    /// `‖K̂ − K*‖∞` per seed and `N` from the averaged-dataset LP.
    pub policy_errors: Vec<Vec<f64>>,
    pub policy_medians: Vec<f64>,
    /// Same pipeline on the noise-free system at the largest `N`.
    pub baseline_policy_error: f64,
    pub threshold: f64,
}

impl StochasticReport {
    pub fn curve(&self, method: &str, target: &str) -> Option<&EstimatorCurve> {
        self.curves.iter().find(|c| c.method == method && c.target == target)
    }

    pub fn write_errors_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["method", "target", "samples", "median_error"])?;
        for c in &self.curves {
            for (k, &nn) in self.n_grid.iter().enumerate() {
                wr.write_record([c.method.clone(), c.target.clone(), nn.to_string(), fmt(c.medians[k])])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_policy_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        wr.write_record(["samples", "median_gain_error", "max_gain_error"])?;
        for (k, &nn) in self.n_grid.iter().enumerate() {
            let col: Vec<f64> = self.policy_errors.iter().map(|e| e[k]).collect();
            wr.write_record([
                nn.to_string(),
                fmt(self.policy_medians[k]),
                fmt(col.iter().copied().fold(0.0, f64::max)),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

struct SeedErrors {
    a_expected: Vec<f64>,
    a_h: Vec<f64>,
    b_h: Vec<f64>,
    b_expected: Vec<f64>,
    c_h: Vec<f64>,
    policy: Vec<f64>,
}

fn stream(seed_idx: usize, grid_idx: usize, grid_len: usize, method: u64) -> u64 {
    ((seed_idx * grid_len + grid_idx) as u64) * 4 + method
}

/// Groups of `samples` transitions around random centers, concatenated in
/// group order.
fn grouped_data<R: Rng + ?Sized>(
    problem: &ControlProblem,
    groups: usize,
    samples: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let (n, m) = (problem.n(), problem.m());
    let total = groups * samples;
    let mut x = DMatrix::zeros(n, total);
    let mut u = DMatrix::zeros(m, total);
    let mut xp = DMatrix::zeros(n, total);
    for g in 0..groups {
        let xc = random_vector(n, rng);
        let uc = random_vector(m, rng);
        for s in 0..samples {
            let k = g * samples + s;
            let xs = &xc + spread * random_vector(n, rng);
            let us = &uc + spread * random_vector(m, rng);
            let next = problem.step(&xs, &us, &problem.draw_noise(rng))?;
            x.set_column(k, &xs);
            u.set_column(k, &us);
            xp.set_column(k, &next);
        }
    }
    Dataset::new(x, u, xp)
}

/// Averaged-dataset pipeline: mean constraint-matrix error against the
/// model at the synthesized pairs, and the greedy-gain error of the LP.
fn averaged_policy_error<R: Rng + ?Sized>(
    problem: &ControlProblem,
    opts: &StochasticOptions,
    samples: usize,
    alpha_scale: f64,
    lp: &SolverOptions,
    k_star: &PolicyGain,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let raw = grouped_data(problem, opts.groups, samples, opts.spread, rng)?;
    let avg = raw.partition_and_average(opts.groups, samples)?;
    let gamma = problem.gamma();
    let mut rows: Vec<ConstraintRow> = Vec::with_capacity(opts.constraints);
    let mut h_err = 0.0;
    for _ in 0..opts.constraints {
        let alpha = DVector::from_fn(avg.len(), |_, _| alpha_scale * rng.sample::<f64, _>(StandardNormal));
        let h = synth_h(&avg, &alpha, gamma)?;
        let x = avg.x() * &alpha;
        let u = avg.u() * &alpha;
        h_err += (&h - h_matrix(problem, &x, &u)?).norm();
        let rhs = problem.cost().eval(&x, &u)?.max(0.0);
        rows.push(make_row(&h, rhs, Provenance::DatasetAverage, Some((x, u)))?);
    }
    h_err /= opts.constraints.max(1) as f64;
    let inst = build_lp(&rows, problem.n(), OffsetMode::Fixed)?;
    let k_err = match lp_value(&inst, lp, problem.n(), false)?.2 {
        Some(v) => match problem.greedy_gain(&v) {
            Ok(k) => sup_norm(&(&k.k - &k_star.k)),
            Err(_) => f64::INFINITY,
        },
        None => f64::INFINITY,
    };
    Ok((h_err, k_err))
}

fn stochastic_seed(cfg: &ExperimentConfig, k_star: &PolicyGain, s: usize) -> Result<SeedErrors> {
    let problem = &cfg.problem;
    let opts = &cfg.stochastic;
    let (n, m) = (problem.n(), problem.m());
    let gamma = problem.gamma();
    let glen = opts.n_grid.len();
    let mut pick = run_rng(cfg.seed, stream(s, glen, glen, 0));
    let x = random_vector(n, &mut pick);
    let u = random_vector(m, &mut pick);
    let h = h_matrix(problem, &x, &u)?;
    let eg = expected_g(problem, &x, &u)?;
    let mut out = SeedErrors {
        a_expected: Vec::new(),
        a_h: Vec::new(),
        b_h: Vec::new(),
        b_expected: Vec::new(),
        c_h: Vec::new(),
        policy: Vec::new(),
    };
    for (gi, &nn) in opts.n_grid.iter().enumerate() {
        let mut rng = run_rng(cfg.seed, stream(s, gi, glen, 1));
        let ga = reinit_average_g(problem, &x, &u, nn, &mut rng)?;
        out.a_expected.push((&ga - &eg).norm());
        out.a_h.push((&ga - &h).norm());

        let mut rng = run_rng(cfg.seed, stream(s, gi, glen, 2));
        let cols: Vec<_> = (0..nn)
            .map(|_| {
                let xi = problem.draw_noise(&mut rng);
                Ok((x.clone(), u.clone(), problem.step(&x, &u, &xi)?))
            })
            .collect::<Result<_>>()?;
        let triple = Dataset::from_columns(&cols)?.sample_mean();
        let mb = outer_difference(&triple.x_bar, &triple.xplus_bar, gamma);
        let h_bar = h_matrix(problem, &triple.x_bar, &triple.u_bar)?;
        out.b_h.push((&mb - &h_bar).norm());
        out.b_expected
            .push((&mb - expected_g(problem, &triple.x_bar, &triple.u_bar)?).norm());

        let mut rng = run_rng(cfg.seed, stream(s, gi, glen, 3));
        let (c_h, k_err) = averaged_policy_error(problem, opts, nn, cfg.alpha_scale, &cfg.lp, k_star, &mut rng)?;
        out.c_h.push(c_h);
        out.policy.push(k_err);
    }
    Ok(out)
}

/// Re-initialization averaging, sample-mean rows and the averaged-dataset
/// heuristic over a grid of sample sizes.
pub fn stochastic_experiment(cfg: &ExperimentConfig) -> Result<StochasticReport> {
    cfg.validate()?;
    let opts = &cfg.stochastic;
    let problem = &cfg.problem;
    let k_star = problem.solve_are(AreOptions::default())?.gain;
    let per_seed: Vec<SeedErrors> = (0..opts.seeds)
        .into_par_iter()
        .map(|s| stochastic_seed(cfg, &k_star, s))
        .collect::<Result<_>>()?;
    let take = |f: fn(&SeedErrors) -> &Vec<f64>| per_seed.iter().map(|e| f(e).clone()).collect::<Vec<_>>();
    let curves = vec![
        EstimatorCurve::new("reinit", "expected", take(|e| &e.a_expected)),
        EstimatorCurve::new("reinit", "model", take(|e| &e.a_h)),
        EstimatorCurve::new("sample-mean", "model", take(|e| &e.b_h)),
        EstimatorCurve::new("sample-mean", "expected", take(|e| &e.b_expected)),
        EstimatorCurve::new("averaged-dataset", "model", take(|e| &e.c_h)),
    ];
    let policy_errors = take(|e| &e.policy);
    let policy_medians = (0..opts.n_grid.len())
        .map(|k| median(&policy_errors.iter().map(|e| e[k]).collect::<Vec<_>>()))
        .collect();

    let clean = problem.with_sigma(DMatrix::zeros(problem.n(), problem.n()))?;
    let largest = *opts.n_grid.iter().max().unwrap_or(&1);
    let baseline: Vec<f64> = (0..opts.seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = run_rng(cfg.seed ^ 0x5eed, s as u64);
            averaged_policy_error(&clean, opts, largest, cfg.alpha_scale, &cfg.lp, &k_star, &mut rng).map(|r| r.1)
        })
        .collect::<Result<_>>()?;
    Ok(StochasticReport {
        n_grid: opts.n_grid.clone(),
        seeds: opts.seeds,
        curves,
        policy_errors,
        policy_medians,
        baseline_policy_error: median(&baseline),
        threshold: opts.threshold,
    })
}

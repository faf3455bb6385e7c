//! TOML run configuration. Every table is optional; omitted fields take the
//! reference-system defaults.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, PiOptions, StochasticOptions};
use crate::linalg::{mat_from_rows, mat_to_rows};
use crate::lpsolve::SolverOptions;
use crate::lqsystem::{ControlProblem, StageCost};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(rename = "A")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Sigma")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(rename = "L")]
    pub l: Option<Vec<Vec<f64>>>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSection {
    pub length: Option<usize>,
    pub episode_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetedSection {
    /// Each entry is `[x_1, …, x_n, u_1, …, u_m]`; default is the standard
    /// basis of the joint space.
    pub pairs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub count: Option<usize>,
    pub alpha_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub runs: Option<usize>,
    pub n_observed: Option<usize>,
    pub n_synthetic: Option<usize>,
    pub batch: Option<usize>,
    pub episode_len: Option<usize>,
    pub alpha_scale: Option<f64>,
    pub include_e: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSection {
    pub iterations: Option<usize>,
    pub states_per_iter: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticSection {
    pub n_grid: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub groups: Option<usize>,
    pub constraints: Option<usize>,
    pub spread: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpSection {
    pub activity_tol: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub explore: ExploreSection,
    #[serde(default)]
    pub targeted: TargetedSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub pi: PiSection,
    #[serde(default)]
    pub stochastic: StochasticSection,
    #[serde(default)]
    pub lp: LpSection,
}

fn matrix(name: &str, rows: &Option<Vec<Vec<f64>>>) -> Result<Option<DMatrix<f64>>> {
    match rows {
        None => Ok(None),
        Some(r) => mat_from_rows(r)
            .map(Some)
            .ok_or_else(|| Error::Parse(format!("{name} must be a non-empty rectangular array of rows"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The configured system; the reference system fills in what is missing.
    pub fn problem(&self) -> Result<ControlProblem> {
        let p = &self.problem;
        let gamma = p.gamma.unwrap_or(0.95);
        let reference = ControlProblem::reference(gamma)?;
        let a = matrix("A", &p.a)?.unwrap_or_else(|| reference.a().clone());
        let b = matrix("B", &p.b)?.unwrap_or_else(|| reference.b().clone());
        let n = a.nrows();
        let m = b.ncols();
        let sigma = matrix("Sigma", &p.sigma)?.unwrap_or_else(|| DMatrix::zeros(n, n));
        let cost = match matrix("L", &p.l)? {
            Some(l) => StageCost::new(l, n)?,
            None => StageCost::identity(n, m),
        };
        ControlProblem::new(a, b, sigma, gamma, cost)
    }

    pub fn lp_options(&self) -> SolverOptions {
        let d = SolverOptions::default();
        SolverOptions {
            activity_tol: self.lp.activity_tol.unwrap_or(d.activity_tol),
            tol: self.lp.tol.unwrap_or(d.tol),
            max_iter: self.lp.max_iter.unwrap_or(d.max_iter),
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(self.problem()?);
        let e = &self.experiment;
        cfg.seed = self.seed();
        cfg.runs = e.runs.unwrap_or(cfg.runs);
        cfg.n_observed = e.n_observed.unwrap_or(cfg.n_observed);
        cfg.n_synthetic = e.n_synthetic.unwrap_or(cfg.n_synthetic);
        cfg.batch = e.batch.unwrap_or(cfg.batch);
        cfg.episode_len = e.episode_len.unwrap_or(cfg.episode_len);
        cfg.alpha_scale = e.alpha_scale.unwrap_or(cfg.alpha_scale);
        cfg.include_e = e.include_e.unwrap_or(cfg.include_e);
        cfg.lp = self.lp_options();
        let pd = PiOptions::default();
        cfg.pi = PiOptions {
            iterations: self.pi.iterations.unwrap_or(pd.iterations),
            states_per_iter: self.pi.states_per_iter.or(pd.states_per_iter),
            tol: self.pi.tol.unwrap_or(pd.tol),
        };
        let sd = StochasticOptions::default();
        let s = &self.stochastic;
        cfg.stochastic = StochasticOptions {
            n_grid: s.n_grid.clone().unwrap_or(sd.n_grid),
            seeds: s.seeds.unwrap_or(sd.seeds),
            groups: s.groups.unwrap_or(sd.groups),
            constraints: s.constraints.unwrap_or(sd.constraints),
            spread: s.spread.unwrap_or(sd.spread),
            threshold: s.threshold.unwrap_or(sd.threshold),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Echo of the resolved system for manifests.
    pub fn problem_echo(problem: &ControlProblem) -> serde_json::Value {
        serde_json::json!({
            "A": mat_to_rows(problem.a()),
            "B": mat_to_rows(problem.b()),
            "Sigma": mat_to_rows(problem.sigma()),
            "L": mat_to_rows(problem.cost().matrix()),
            "gamma": problem.gamma(),
        })
    }
}

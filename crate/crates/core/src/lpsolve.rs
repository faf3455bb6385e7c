//! The finite LP `max tr(P) [+ e]` over sampled Bellman inequalities and a
//! dense active-set simplex solver for it.
//!
//! The solver works directly in the space of the free decision variables.
//! A working set of linearly independent rows is kept active; the objective
//! gradient is projected onto their null space to find an improving edge,
//! and a ratio test picks the blocking row. When the projection vanishes the
//! multipliers decide between optimality and dropping a row. Both the
//! blocking row and the dropped row are chosen by lowest index among ties
//! (Bland's rule), which rules out cycling at degenerate vertices. Because
//! every right-hand side is nonnegative the origin is feasible, so no phase
//! one is needed and the outcome is either optimal or unbounded.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{half_len, ConstraintRow, Provenance, SymHalfVec};
use crate::error::{Error, Result};
use crate::lqsystem::QuadraticValue;

/// Handling of the constant offset `e` of the value function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetMode {
    /// `e = 0`, objective `tr(P)`.
    Fixed,
    /// `e` is a decision variable with objective weight 1 and row
    /// coefficient `1 − γ`.
    Free { gamma: f64 },
}

impl OffsetMode {
    pub fn includes_e(self) -> bool {
        matches!(self, OffsetMode::Free { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
    pub provenance: Option<Provenance>,
}

/// `max cᵀy  s.t.  a_iᵀy ≤ b_i`, `y` free, every `b_i ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpInstance {
    pub objective: Vec<f64>,
    pub rows: Vec<LpRow>,
    /// Value-matrix dimension when the instance came from constraint rows.
    pub n: Option<usize>,
    pub offset: OffsetMode,
}

impl LpInstance {
    /// Generic instance. Rejects negative right-hand sides and ragged rows.
    pub fn new(objective: Vec<f64>, rows: Vec<LpRow>) -> Result<Self> {
        let inst = Self {
            objective,
            rows,
            n: None,
            offset: OffsetMode::Fixed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn dim(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, r) in self.rows.iter().enumerate() {
            if r.coeffs.len() != d {
                return Err(Error::shape("LP row", d, r.coeffs.len()));
            }
            if !(r.rhs >= 0.0) {
                return Err(Error::InvalidArgument(format!("row {i} has negative rhs {}", r.rhs)));
            }
        }
        Ok(())
    }

    /// Largest violation `max(0, a_iᵀy − b_i)` over all rows.
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| (dot(&r.coeffs, y) - r.rhs).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn push_rows(&mut self, rows: &[ConstraintRow]) -> Result<()> {
        let n = self
            .n
            .ok_or_else(|| Error::State("instance has no value dimension".into()))?;
        for r in rows {
            self.rows.push(lp_row(r, n, self.offset)?);
        }
        Ok(())
    }
}

fn lp_row(r: &ConstraintRow, n: usize, offset: OffsetMode) -> Result<LpRow> {
    if r.n() != n {
        return Err(Error::shape("constraint row", n, r.n()));
    }
    let mut coeffs = r.coeffs.entries().to_vec();
    if let OffsetMode::Free { gamma } = offset {
        coeffs.push(1.0 - gamma);
    }
    Ok(LpRow {
        coeffs,
        rhs: r.rhs,
        provenance: Some(r.provenance),
    })
}

/// Assembles the LP over `vec(P)` (and `e` when free) from constraint rows.
pub fn build_lp(rows: &[ConstraintRow], n: usize, offset: OffsetMode) -> Result<LpInstance> {
    if n == 0 {
        return Err(Error::InvalidArgument("value dimension must be positive".into()));
    }
    let mut objective = SymHalfVec::bilinear_coeffs(&DMatrix::identity(n, n)).entries().to_vec();
    if offset.includes_e() {
        objective.push(1.0);
    }
    let rows = rows.iter().map(|r| lp_row(r, n, offset)).collect::<Result<Vec<_>>>()?;
    let inst = LpInstance {
        objective,
        rows,
        n: Some(n),
        offset,
    };
    inst.validate()?;
    Ok(inst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimal point, or the last iterate when unbounded.
    pub y: Vec<f64>,
    pub objective_value: f64,
    /// Rows with `|a_iᵀy − b_i|` within the activity tolerance.
    pub active_set: Vec<usize>,
    /// Improving feasible direction certifying unboundedness.
    pub ray: Option<Vec<f64>>,
    pub iterations: usize,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Absolute tolerance on `|a_iᵀy − b_i|` for reporting active rows.
    pub activity_tol: f64,
    /// Relative tolerance for optimality and degeneracy decisions.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            activity_tol: 1e-7,
            tol: 1e-10,
            max_iter: 50_000,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection data for the current working set.
struct Projection {
    /// Component of `c` orthogonal to the working rows.
    direction: DVector<f64>,
    /// Least-squares multipliers of `c` on the working rows.
    multipliers: DVector<f64>,
}

fn project(rows: &[DVector<f64>], working: &[usize], c: &DVector<f64>) -> Result<Projection> {
    if working.is_empty() {
        return Ok(Projection {
            direction: c.clone(),
            multipliers: DVector::zeros(0),
        });
    }
    let d = c.len();
    let at = DMatrix::from_fn(d, working.len(), |i, k| rows[working[k]][i]);
    let qr = at.qr();
    let q = qr.q();
    let r = qr.r();
    let qtc = q.transpose() * c;
    let multipliers = r.solve_upper_triangular(&qtc).ok_or(Error::Singular("working set"))?;
    let direction = c - &q * qtc;
    Ok(Projection { direction, multipliers })
}

/// Minimum-norm correction putting `y` back on `A_W y = b_W`.
fn snap(rows: &[DVector<f64>], rhs: &[f64], working: &[usize], y: &mut DVector<f64>) {
    if working.is_empty() {
        return;
    }
    let d = y.len();
    let aw = DMatrix::from_fn(working.len(), d, |k, i| rows[working[k]][i]);
    let resid = DVector::from_iterator(working.len(), working.iter().map(|&w| rhs[w] - rows[w].dot(y)));
    let gram = &aw * aw.transpose();
    if let Some(z) = gram.cholesky().map(|ch| ch.solve(&resid)) {
        *y += aw.transpose() * z;
    }
}

/// Solves the LP. Deterministic for a given instance.
pub fn solve_lp(inst: &LpInstance, opts: &SolverOptions) -> Result<LpSolution> {
    inst.validate()?;
    let d = inst.dim();
    let c = DVector::from_column_slice(&inst.objective);
    let cnorm = c.norm();
    // Row-normalized copy; zero rows are vacuous since their rhs is >= 0.
    let mut rows = Vec::with_capacity(inst.rows.len());
    let mut rhs = Vec::with_capacity(inst.rows.len());
    let mut live = Vec::with_capacity(inst.rows.len());
    for r in &inst.rows {
        let a = DVector::from_column_slice(&r.coeffs);
        let nrm = a.norm();
        if nrm > 0.0 {
            rows.push(a / nrm);
            rhs.push(r.rhs / nrm);
            live.push(true);
        } else {
            rows.push(a);
            rhs.push(r.rhs);
            live.push(false);
        }
    }

    let mut y = DVector::zeros(d);
    let mut working: Vec<usize> = Vec::new();
    let mut in_working = vec![false; rows.len()];

    let finish = |status: LpStatus, y: DVector<f64>, ray: Option<Vec<f64>>, iterations: usize| {
        let yv: Vec<f64> = y.iter().copied().collect();
        let active_set = inst
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| (dot(&r.coeffs, &yv) - r.rhs).abs() <= opts.activity_tol)
            .map(|(i, _)| i)
            .collect();
        LpSolution {
            status,
            objective_value: dot(&inst.objective, &yv),
            max_violation: inst.max_violation(&yv),
            y: yv,
            active_set,
            ray,
            iterations,
        }
    };

    if cnorm == 0.0 {
        return Ok(finish(LpStatus::Optimal, y, None, 0));
    }
    let zero_tol = opts.tol * cnorm;

    for iter in 0..opts.max_iter {
        let proj = project(&rows, &working, &c)?;
        let pnorm = proj.direction.norm();
        if working.len() == d || pnorm <= zero_tol {
            // c lies in the span of the working rows.
            let drop = working
                .iter()
                .zip(proj.multipliers.iter())
                .filter(|(_, &l)| l < -zero_tol)
                .map(|(&w, _)| w)
                .min();
            match drop {
                None => {
                    snap(&rows, &rhs, &working, &mut y);
                    return Ok(finish(LpStatus::Optimal, y, None, iter));
                }
                Some(w) => {
                    working.retain(|&k| k != w);
                    in_working[w] = false;
                    continue;
                }
            }
        }

        let p = proj.direction / pnorm;
        // Ratio test; ties go to the lowest row index.
        let steps: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_working[*i] && live[*i])
            .filter_map(|(i, a)| {
                let s = a.dot(&p);
                (s > opts.tol).then(|| (i, ((rhs[i] - a.dot(&y)) / s).max(0.0)))
            })
            .collect();
        let best = steps.iter().map(|s| s.1).reduce(f64::min).map(|tmin| {
            let cut = tmin + opts.tol * (1.0 + tmin);
            *steps.iter().find(|s| s.1 <= cut).unwrap()
        });
        match best {
            None => {
                let ray: Vec<f64> = p.iter().copied().collect();
                return Ok(finish(LpStatus::Unbounded, y, Some(ray), iter));
            }
            Some((i, t)) => {
                y += t * &p;
                working.push(i);
                in_working[i] = true;
                snap(&rows, &rhs, &working, &mut y);
            }
        }
    }
    Err(Error::Solver {
        iterations: opts.max_iter,
        message: format!(
            "iteration cap reached with {} working rows, objective {:.6e}",
            working.len(),
            c.dot(&y)
        ),
    })
}

/// Rebuilds `P` (and `e`) from an optimal solution.
pub fn extract_value(sol: &LpSolution, n: usize, include_e: bool) -> Result<QuadraticValue> {
    if sol.status != LpStatus::Optimal {
        return Err(Error::State("cannot extract a value from an unbounded LP".into()));
    }
    let h = half_len(n);
    let want = h + include_e as usize;
    if sol.y.len() != want {
        return Err(Error::shape("LP solution", want, sol.y.len()));
    }
    let p = SymHalfVec::new(n, sol.y[..h].to_vec())?.to_matrix();
    let e = if include_e { sol.y[h] } else { 0.0 };
    Ok(QuadraticValue::new(p, e))
}

/// Active rows at the optimum with their provenance labels.
pub fn support_constraints(inst: &LpInstance, sol: &LpSolution, tol: f64) -> Result<Vec<(usize, Option<Provenance>)>> {
    if sol.status != LpStatus::Optimal {
        return Err(Error::State("support constraints need an optimal solution".into()));
    }
    Ok(inst
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| (dot(&r.coeffs, &sol.y) - r.rhs).abs() <= tol)
        .map(|(i, r)| (i, r.provenance))
        .collect())
}

/// JSON header accompanying an exported LP.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LpHeader {
    pub dim: usize,
    pub n: Option<usize>,
    pub objective: Vec<f64>,
    pub include_e: bool,
    pub gamma: Option<f64>,
}

/// Writes the header JSON and the row CSV (`a_1..a_d,rhs,provenance`).
pub fn write_lp<H: Write, R: Write>(inst: &LpInstance, header: H, rows: R) -> Result<()> {
    let (include_e, gamma) = match inst.offset {
        OffsetMode::Fixed => (false, None),
        OffsetMode::Free { gamma } => (true, Some(gamma)),
    };
    let hdr = LpHeader {
        dim: inst.dim(),
        n: inst.n,
        objective: inst.objective.clone(),
        include_e,
        gamma,
    };
    serde_json::to_writer_pretty(header, &hdr)?;
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(rows);
    let mut names: Vec<String> = (1..=inst.dim()).map(|k| format!("a_{k}")).collect();
    names.push("rhs".into());
    names.push("provenance".into());
    wr.write_record(&names)?;
    for r in &inst.rows {
        let mut rec: Vec<String> = r.coeffs.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", r.rhs));
        rec.push(r.provenance.map_or(String::new(), |p| p.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_lp<H: Read, R: Read>(header: H, rows: R) -> Result<LpInstance> {
    let hdr: LpHeader = serde_json::from_reader(header)?;
    if hdr.objective.len() != hdr.dim {
        return Err(Error::Parse("objective length differs from dim".into()));
    }
    let offset = match (hdr.include_e, hdr.gamma) {
        (false, _) => OffsetMode::Fixed,
        (true, Some(gamma)) => OffsetMode::Free { gamma },
        (true, None) => return Err(Error::Parse("include_e requires gamma".into())),
    };
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rows);
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != hdr.dim + 2 {
            return Err(Error::Parse(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let nums = rec
            .iter()
            .take(hdr.dim + 1)
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
        let prov = match &rec[hdr.dim + 1] {
            "" => None,
            s => Some(s.parse()?),
        };
        out.push(LpRow {
            coeffs: nums[..hdr.dim].to_vec(),
            rhs: nums[hdr.dim],
            provenance: prov,
        });
    }
    let inst = LpInstance {
        objective: hdr.objective,
        rows: out,
        n: hdr.n,
        offset,
    };
    inst.validate()?;
    Ok(inst)
}

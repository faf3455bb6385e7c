//! Bellman-inequality rows `⟨H, P⟩ ≤ ℓ(x,u)` over the half-vectorized
//! value matrix, built from a model, from raw observations, or synthesized
//! from a rank-sufficient dataset without new transitions.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Dataset, SampleMeanTriple};
use crate::error::{Error, Result};
use crate::linalg::{concat_vec, numerical_rank};
use crate::lqsystem::{ControlProblem, PolicyGain, StageCost};

/// Upper-triangular entries of a symmetric `p×p` matrix in the order
/// `(1,1), (1,2), …, (1,p), (2,2), …, (p,p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymHalfVec {
    dim: usize,
    entries: Vec<f64>,
}

pub fn half_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Position of `(i, j)`, `i <= j`, in the canonical ordering.
pub fn half_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // Rows 0..i contribute dim, dim-1, …, dim-i+1 entries.
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

impl SymHalfVec {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != half_len(dim) {
            return Err(Error::shape("half-vector", half_len(dim), entries.len()));
        }
        Ok(Self { dim, entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; half_len(dim)],
        }
    }

    /// Plain half-vectorization of the upper triangle.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let p = m.nrows();
        let mut entries = Vec::with_capacity(half_len(p));
        for i in 0..p {
            for j in i..p {
                entries.push(m[(i, j)]);
            }
        }
        Self { dim: p, entries }
    }

    /// Coefficients `a` with `a · vec(P) = tr(M P)` for every symmetric `P`:
    /// the half-vectorization of `M` with off-diagonal entries doubled.
    pub fn bilinear_coeffs(m: &DMatrix<f64>) -> Self {
        let p = m.nrows();
        let mut entries = Vec::with_capacity(half_len(p));
        for i in 0..p {
            for j in i..p {
                let w = if i == j { 1.0 } else { 2.0 };
                entries.push(w * 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        Self { dim: p, entries }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.dim;
        let mut m = DMatrix::zeros(p, p);
        let mut k = 0;
        for i in 0..p {
            for j in i..p {
                m[(i, j)] = self.entries[k];
                m[(j, i)] = self.entries[k];
                k += 1;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn dot(&self, other: &SymHalfVec) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| a * b).sum()
    }
}

/// Where a constraint row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Observed,
    Synthetic,
    ReinitAverage,
    DatasetAverage,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Synthetic => "synthetic",
            Provenance::ReinitAverage => "reinit-average",
            Provenance::DatasetAverage => "dataset-average",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(Provenance::Observed),
            "synthetic" => Ok(Provenance::Synthetic),
            "reinit-average" => Ok(Provenance::ReinitAverage),
            "dataset-average" => Ok(Provenance::DatasetAverage),
            other => Err(Error::Parse(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One linearized Bellman inequality `coeffs · vec(P) ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub coeffs: SymHalfVec,
    pub rhs: f64,
    pub provenance: Provenance,
    pub source: Option<(DVector<f64>, DVector<f64>)>,
}

impl ConstraintRow {
    /// Left-hand side evaluated at a symmetric `P`.
    pub fn lhs(&self, p: &DMatrix<f64>) -> f64 {
        self.coeffs.dot(&SymHalfVec::from_matrix(p))
    }

    pub fn n(&self) -> usize {
        self.coeffs.dim()
    }
}

/// Anything that can price a state-input pair.
pub trait CostOracle {
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;
}

impl CostOracle for StageCost {
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.eval(x, u)
    }
}

/// `x xᵀ − γ x⁺ x⁺ᵀ`.
pub fn outer_difference(x: &DVector<f64>, xnext: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    x * x.transpose() - gamma * xnext * xnext.transpose()
}

/// `H(x,u) = xxᵀ − γ(Ax+Bu)(Ax+Bu)ᵀ`.
pub fn h_matrix(problem: &ControlProblem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let next = problem.mean_next(x, u)?;
    Ok(outer_difference(x, &next, problem.gamma()))
}

/// `G(x,u,ξ) = xxᵀ − γ(Ax+Bu+ξ)(Ax+Bu+ξ)ᵀ`.
pub fn g_matrix(
    problem: &ControlProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let next = problem.step(x, u, xi)?;
    Ok(outer_difference(x, &next, problem.gamma()))
}

/// `E_ξ G(x,u,ξ) = H(x,u) − γΣ` for zero-mean noise.
pub fn expected_g(problem: &ControlProblem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(h_matrix(problem, x, u)? - problem.gamma() * problem.sigma())
}

/// Minimum-norm combination weights for a fixed dataset, with the
/// pseudo-inverse of `[X; U]` computed once.
#[derive(Debug, Clone)]
pub struct AlphaSolver {
    stacked: DMatrix<f64>,
    pinv: DMatrix<f64>,
    n: usize,
    tol: f64,
}

impl AlphaSolver {
    /// Fails with [`Error::RankDeficient`] unless `[X; U]` has full row rank.
    pub fn new(dataset: &Dataset, rtol: Option<f64>) -> Result<Self> {
        let stacked = dataset.stacked();
        let required = dataset.n() + dataset.m();
        let rank = numerical_rank(&stacked, rtol);
        if rank < required {
            return Err(Error::RankDeficient { rank, required });
        }
        // Full row rank: pinv = Zᵀ (Z Zᵀ)⁻¹, computed through the SVD.
        let pinv = stacked
            .clone()
            .pseudo_inverse(0.0)
            .map_err(|_| Error::Singular("data pseudo-inverse"))?;
        Ok(Self {
            stacked,
            pinv,
            n: dataset.n(),
            tol: 1e-9,
        })
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// `α` with `[X; U] α = [x; u]`, minimum Euclidean norm.
    pub fn solve(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.stacked.nrows() - self.n;
        if x.len() != self.n || u.len() != m {
            return Err(Error::shape(
                "alpha target",
                format!("x in R^{}, u in R^{m}", self.n),
                format!("x in R^{}, u in R^{}", x.len(), u.len()),
            ));
        }
        let z = concat_vec(x, u);
        let alpha = &self.pinv * &z;
        let residual = (&self.stacked * &alpha - &z).norm();
        let tol = self.tol * z.norm().max(1.0);
        if residual > tol {
            return Err(Error::Inconsistent { residual, tol });
        }
        Ok(alpha)
    }
}

/// Minimum-norm `α` solving `[x; u] = [X; U] α`.
pub fn solve_alpha(dataset: &Dataset, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    AlphaSolver::new(dataset, None)?.solve(x, u)
}

/// `(Xα)(Xα)ᵀ − γ(X⁺α)(X⁺α)ᵀ`.
pub fn synth_h(dataset: &Dataset, alpha: &DVector<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if alpha.len() != dataset.len() {
        return Err(Error::shape("alpha", dataset.len(), alpha.len()));
    }
    let x = dataset.x() * alpha;
    let xp = dataset.xplus() * alpha;
    Ok(outer_difference(&x, &xp, gamma))
}

/// Row with coefficients `a` such that `a · vec(P) = tr(HP)`.
pub fn make_row(
    h: &DMatrix<f64>,
    rhs: f64,
    provenance: Provenance,
    source: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<ConstraintRow> {
    if !h.is_square() {
        return Err(Error::shape(
            "constraint matrix",
            "square",
            format!("{}x{}", h.nrows(), h.ncols()),
        ));
    }
    if !(rhs >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "constraint right-hand side must be a nonnegative stage cost, got {rhs}"
        )));
    }
    Ok(ConstraintRow {
        coeffs: SymHalfVec::bilinear_coeffs(h),
        rhs,
        provenance,
        source,
    })
}

/// Costs from an oracle can be a hair below zero for PSD `L`.
fn nonneg_cost(c: f64, z: &DVector<f64>) -> f64 {
    if c < 0.0 && c > -1e-12 * z.norm_squared().max(1.0) {
        0.0
    } else {
        c
    }
}

fn synthetic_row(dataset: &Dataset, alpha: &DVector<f64>, cost: &dyn CostOracle, gamma: f64) -> Result<ConstraintRow> {
    let x = dataset.x() * alpha;
    let u = dataset.u() * alpha;
    let xp = dataset.xplus() * alpha;
    let rhs = nonneg_cost(cost.cost(&x, &u)?, &concat_vec(&x, &u));
    make_row(
        &outer_difference(&x, &xp, gamma),
        rhs,
        Provenance::Synthetic,
        Some((x, u)),
    )
}

/// `count` synthetic rows from i.i.d. normal `α` scaled by `alpha_scale`.
pub fn synth_random_rows<R: Rng + ?Sized>(
    dataset: &Dataset,
    cost: &dyn CostOracle,
    gamma: f64,
    count: usize,
    rng: &mut R,
    alpha_scale: f64,
) -> Result<Vec<ConstraintRow>> {
    if count > 0 && !dataset.rank_condition(None) {
        return Err(Error::RankDeficient {
            rank: numerical_rank(&dataset.stacked(), None),
            required: dataset.n() + dataset.m(),
        });
    }
    (0..count)
        .map(|_| {
            let alpha = DVector::from_fn(dataset.len(), |_, _| alpha_scale * rng.sample::<f64, _>(StandardNormal));
            synthetic_row(dataset, &alpha, cost, gamma)
        })
        .collect()
}

/// Rows at `(x, Kx)` for each requested state, synthesized from data.
pub fn synth_policy_rows(
    dataset: &Dataset,
    gain: &PolicyGain,
    states: &[DVector<f64>],
    cost: &dyn CostOracle,
    gamma: f64,
) -> Result<Vec<ConstraintRow>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let solver = AlphaSolver::new(dataset, None)?;
    states
        .iter()
        .map(|x| {
            let u = gain.apply(x);
            let alpha = solver.solve(x, &u)?;
            synthetic_row(dataset, &alpha, cost, gamma)
        })
        .collect()
}

/// Row from a single observed transition, noise included.
pub fn observed_row(
    x: &DVector<f64>,
    u: &DVector<f64>,
    xplus: &DVector<f64>,
    gamma: f64,
    rhs: f64,
) -> Result<ConstraintRow> {
    make_row(
        &outer_difference(x, xplus, gamma),
        rhs,
        Provenance::Observed,
        Some((x.clone(), u.clone())),
    )
}

/// One observed row per dataset column, priced by `cost`.
pub fn observed_rows(dataset: &Dataset, cost: &dyn CostOracle, gamma: f64) -> Result<Vec<ConstraintRow>> {
    (0..dataset.len())
        .map(|k| {
            let (x, u, xp) = dataset.column(k);
            let rhs = cost.cost(&x, &u)?;
            observed_row(&x, &u, &xp, gamma, rhs)
        })
        .collect()
}

/// Monte Carlo estimate `(1/N) Σ G(x,u,ξᵏ)` from `N` re-initializations.
pub fn reinit_average_row<R: Rng + ?Sized>(
    problem: &ControlProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<ConstraintRow> {
    make_row(
        &reinit_average_g(problem, x, u, samples, rng)?,
        problem.cost().eval(x, u)?,
        Provenance::ReinitAverage,
        Some((x.clone(), u.clone())),
    )
}

/// The averaged matrix behind [`reinit_average_row`].
pub fn reinit_average_g<R: Rng + ?Sized>(
    problem: &ControlProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    // Averaging offsets from the first draw keeps the noise-free case exact.
    let first = g_matrix(problem, x, u, &problem.draw_noise(rng))?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for _ in 1..samples {
        let xi = problem.draw_noise(rng);
        acc += g_matrix(problem, x, u, &xi)? - &first;
    }
    Ok(first + acc / samples as f64)
}

/// Row from sample means: `x̄x̄ᵀ − γx̄⁺x̄⁺ᵀ`, which equals `G(x̄, ū, ξ̄)`
/// exactly for linear dynamics while never touching `ξ̄`.
pub fn mean_transition_row(triple: &SampleMeanTriple, gamma: f64, rhs: f64) -> Result<ConstraintRow> {
    make_row(
        &outer_difference(&triple.x_bar, &triple.xplus_bar, gamma),
        rhs,
        Provenance::DatasetAverage,
        Some((triple.x_bar.clone(), triple.u_bar.clone())),
    )
}

fn coeff_header(n: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(half_len(n) + 2);
    for i in 1..=n {
        for j in i..=n {
            h.push(format!("c_{i}_{j}"));
        }
    }
    h
}

/// CSV: canonical half-vector coefficient columns, then `rhs`, `provenance`.
pub fn write_rows_csv<W: Write>(rows: &[ConstraintRow], n: usize, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header = coeff_header(n);
    header.push("rhs".into());
    header.push("provenance".into());
    wr.write_record(&header)?;
    for row in rows {
        if row.n() != n {
            return Err(Error::shape("constraint row", n, row.n()));
        }
        let mut rec: Vec<String> = row.coeffs.entries().iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", row.rhs));
        rec.push(row.provenance.to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Inverse of [`write_rows_csv`]; returns `n` and the rows.
pub fn read_rows_csv<R: Read>(r: R) -> Result<(usize, Vec<ConstraintRow>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers()?.clone();
    let ncoef = header
        .len()
        .checked_sub(2)
        .ok_or_else(|| Error::Parse("short header".into()))?;
    let n = (0..=ncoef)
        .find(|&p| half_len(p) == ncoef)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::Parse(format!("{ncoef} coefficient columns is not a triangular number")))?;
    let mut expected = coeff_header(n);
    expected.push("rhs".into());
    expected.push("provenance".into());
    if header.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(Error::Parse(format!("unexpected constraint header: {header:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != ncoef + 2 {
            return Err(Error::Parse(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let nums = rec
            .iter()
            .take(ncoef + 1)
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
        let provenance: Provenance = rec[ncoef + 1].parse()?;
        let rhs = nums[ncoef];
        if !(rhs >= 0.0) {
            return Err(Error::Parse(format!("row {}: negative rhs {rhs}", line + 2)));
        }
        rows.push(ConstraintRow {
            coeffs: SymHalfVec::new(n, nums[..ncoef].to_vec())?,
            rhs,
            provenance,
            source: None,
        });
    }
    Ok((n, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{basis_pairs, collect_rollout, collect_targeted, random_inputs, random_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn half_index_order() {
        let got: Vec<usize> = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
            .iter()
            .map(|&(i, j)| half_index(3, i, j))
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(half_index(3, 2, 1), 4);
        assert_eq!(half_index(4, 3, 3), half_len(4) - 1);
    }

    fn reference() -> ControlProblem {
        ControlProblem::reference(0.95).unwrap()
    }

    fn rollout(p: &ControlProblem, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_inputs(p.m(), len, &mut rng);
        collect_rollout(p, &random_vector(p.n(), &mut rng), &u, &mut rng).unwrap()
    }

    #[test]
    fn half_vec_layout() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let h = SymHalfVec::from_matrix(&m);
        assert_eq!(h.entries(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(h.to_matrix(), m);
        assert_eq!(half_len(3), 6);
        assert!(SymHalfVec::new(3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn h_matrix_examples() {
        let p = reference();
        let z = v(&[0.0, 0.0]);
        assert_eq!(h_matrix(&p, &z, &v(&[0.0])).unwrap(), DMatrix::zeros(2, 2));
        let h = h_matrix(&p, &v(&[1.0, 0.0]), &v(&[0.0])).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.05, -0.475, -0.475, -0.2375]);
        assert!((h - want).amax() < 1e-15);
        let tiny =
            ControlProblem::deterministic(p.a().clone(), p.b().clone(), 1e-300, StageCost::identity(2, 1)).unwrap();
        let x = v(&[0.3, -2.0]);
        let h0 = h_matrix(&tiny, &x, &v(&[5.0])).unwrap();
        assert!((h0 - &x * x.transpose()).amax() < 1e-280);
        assert!(h_matrix(&p, &v(&[1.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn g_matrix_examples() {
        let p = reference();
        let x = v(&[0.4, 1.1]);
        let u = v(&[-0.7]);
        assert_eq!(
            g_matrix(&p, &x, &u, &v(&[0.0, 0.0])).unwrap(),
            h_matrix(&p, &x, &u).unwrap()
        );
        let xi = v(&[0.2, -0.3]);
        let g = g_matrix(&p, &v(&[0.0, 0.0]), &v(&[0.0]), &xi).unwrap();
        assert!((g + 0.95 * &xi * xi.transpose()).amax() < 1e-16);
    }

    #[test]
    fn expected_g_examples() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let p = reference().with_sigma(sigma.clone()).unwrap();
        let det = reference();
        let x = v(&[1.0, -1.0]);
        let u = v(&[0.5]);
        assert_eq!(expected_g(&det, &x, &u).unwrap(), h_matrix(&det, &x, &u).unwrap());
        let e0 = expected_g(&p, &v(&[0.0, 0.0]), &v(&[0.0])).unwrap();
        assert!((e0 + 0.95 * &sigma).amax() < 1e-16);

        // Monte Carlo mean within three standard errors, entrywise.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut sum = DMatrix::zeros(2, 2);
        let mut sumsq = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let g = g_matrix(&p, &x, &u, &p.draw_noise(&mut rng)).unwrap();
            sumsq += g.component_mul(&g);
            sum += g;
        }
        let mean = &sum / draws as f64;
        let var = sumsq / draws as f64 - mean.component_mul(&mean);
        let exp = expected_g(&p, &x, &u).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let se = (var[(i, j)] / draws as f64).sqrt();
                assert!((mean[(i, j)] - exp[(i, j)]).abs() <= 3.0 * se, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn solve_alpha_examples() {
        let p = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = collect_targeted(&p, &basis_pairs(2, 1), &mut rng).unwrap();
        let (x1, u1, _) = basis.column(1);
        assert_eq!(solve_alpha(&basis, &x1, &u1).unwrap(), v(&[0.0, 1.0, 0.0]));

        let d = rollout(&p, 8, 4);
        assert_eq!(solve_alpha(&d, &v(&[0.0, 0.0]), &v(&[0.0])).unwrap().norm(), 0.0);
        for _ in 0..20 {
            let x = random_vector(2, &mut rng);
            let u = random_vector(1, &mut rng);
            let a = solve_alpha(&d, &x, &u).unwrap();
            let back = d.stacked() * &a;
            assert!((back - concat_vec(&x, &u)).norm() <= 1e-10);
            // Minimum norm: α lies in the row space of [X; U].
            let proj = d.stacked().transpose()
                * (d.stacked() * d.stacked().transpose()).try_inverse().unwrap()
                * d.stacked()
                * &a;
            assert!((proj - &a).norm() < 1e-10 * a.norm().max(1.0));
        }
        let short = rollout(&p, 2, 4);
        assert!(matches!(
            solve_alpha(&short, &v(&[1.0, 0.0]), &v(&[0.0])),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn synth_h_examples() {
        let p = reference();
        let d = rollout(&p, 6, 2);
        let (x2, _, xp2) = d.column(2);
        let mut e = DVector::zeros(6);
        e[2] = 1.0;
        assert_eq!(synth_h(&d, &e, 0.95).unwrap(), outer_difference(&x2, &xp2, 0.95));
        assert_eq!(synth_h(&d, &DVector::zeros(6), 0.95).unwrap(), DMatrix::zeros(2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let alpha = random_vector(6, &mut rng);
            let s = synth_h(&d, &alpha, 0.95).unwrap();
            let z = d.stacked() * &alpha;
            let h = h_matrix(&p, &z.rows(0, 2).into_owned(), &z.rows(2, 1).into_owned()).unwrap();
            assert!((&s - &h).norm() <= 1e-9 * h.norm().max(1e-300));
        }
        assert!(synth_h(&d, &DVector::zeros(3), 0.95).is_err());
    }

    #[test]
    fn make_row_examples() {
        let r = make_row(&DMatrix::identity(2, 2), 1.0, Provenance::Observed, None).unwrap();
        assert_eq!(r.lhs(&DMatrix::identity(2, 2)), 2.0);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let r = make_row(&h, 0.0, Provenance::Observed, None).unwrap();
        let pm = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(r.lhs(&pm), 8.0);
        assert_eq!(r.lhs(&pm), (&h * &pm).trace());
        let zero = make_row(&DMatrix::zeros(2, 2), 0.5, Provenance::Synthetic, None).unwrap();
        assert!(zero.coeffs.entries().iter().all(|&c| c == 0.0));
        assert!(make_row(&h, -1.0, Provenance::Observed, None).is_err());
        assert!(make_row(&h, f64::NAN, Provenance::Observed, None).is_err());
    }

    #[test]
    fn synth_random_rows_examples() {
        let p = reference();
        let d = rollout(&p, 10, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(synth_random_rows(&d, p.cost(), 0.95, 0, &mut rng, 1.0)
            .unwrap()
            .is_empty());
        let rows = synth_random_rows(&d, p.cost(), 0.95, 25, &mut rng, 1.0).unwrap();
        for row in &rows {
            let (x, u) = row.source.clone().unwrap();
            let oracle = make_row(
                &h_matrix(&p, &x, &u).unwrap(),
                p.cost().eval(&x, &u).unwrap(),
                Provenance::Synthetic,
                None,
            )
            .unwrap();
            for (a, b) in row.coeffs.entries().iter().zip(oracle.coeffs.entries()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            assert!((row.rhs - oracle.rhs).abs() <= 1e-9 * oracle.rhs.max(1.0));
            assert_eq!(row.provenance, Provenance::Synthetic);
        }
        let a = synth_random_rows(&d, p.cost(), 0.95, 5, &mut ChaCha8Rng::seed_from_u64(9), 0.5).unwrap();
        let b = synth_random_rows(&d, p.cost(), 0.95, 5, &mut ChaCha8Rng::seed_from_u64(9), 0.5).unwrap();
        assert_eq!(a, b);
        let short = rollout(&p, 2, 7);
        assert!(synth_random_rows(&short, p.cost(), 0.95, 3, &mut rng, 1.0).is_err());
    }

    #[test]
    fn synth_policy_rows_examples() {
        let p = reference();
        let d = rollout(&p, 10, 8);
        let x = v(&[0.6, -0.8]);
        let rows = synth_policy_rows(&d, &PolicyGain::zeros(1, 2), std::slice::from_ref(&x), p.cost(), 0.95).unwrap();
        let (sx, su) = rows[0].source.clone().unwrap();
        assert!((sx - &x).norm() < 1e-12 && su.norm() < 1e-12);

        let k = PolicyGain::new(DMatrix::from_row_slice(1, 2, &[-0.6, -0.2]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<_> = (0..6).map(|_| random_vector(2, &mut rng)).collect();
        let rows = synth_policy_rows(&d, &k, &states, p.cost(), 0.95).unwrap();
        for (row, x) in rows.iter().zip(&states) {
            let u = k.apply(x);
            let h = h_matrix(&p, x, &u).unwrap();
            let want = SymHalfVec::bilinear_coeffs(&h);
            for (a, b) in row.coeffs.entries().iter().zip(want.entries()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            assert!((row.rhs - p.cost().eval(x, &u).unwrap()).abs() < 1e-9);
        }
        assert!(synth_policy_rows(&d, &k, &[], p.cost(), 0.95).unwrap().is_empty());
    }

    #[test]
    fn observed_row_examples() {
        let p = reference();
        let x = v(&[0.5, 0.5]);
        let u = v(&[1.0]);
        let xp = p.mean_next(&x, &u).unwrap();
        let l = p.cost().eval(&x, &u).unwrap();
        let obs = observed_row(&x, &u, &xp, 0.95, l).unwrap();
        let exact = make_row(
            &h_matrix(&p, &x, &u).unwrap(),
            l,
            Provenance::Observed,
            Some((x.clone(), u.clone())),
        )
        .unwrap();
        assert_eq!(obs, exact);

        let xi = v(&[0.1, -0.4]);
        let r = observed_row(&v(&[0.0, 0.0]), &v(&[0.0]), &xi, 0.95, 0.0).unwrap();
        assert_eq!(r.coeffs, SymHalfVec::bilinear_coeffs(&(-0.95 * &xi * xi.transpose())));

        let noisy = p.with_sigma(DMatrix::identity(2, 2) * 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xi = noisy.draw_noise(&mut rng);
        let xp = noisy.step(&x, &u, &xi).unwrap();
        let r = observed_row(&x, &u, &xp, 0.95, l).unwrap();
        assert_eq!(
            r.coeffs,
            SymHalfVec::bilinear_coeffs(&g_matrix(&noisy, &x, &u, &xi).unwrap())
        );
    }

    #[test]
    fn reinit_average_row_examples() {
        let noisy = reference().with_sigma(DMatrix::identity(2, 2)).unwrap();
        let x = v(&[1.0, -0.5]);
        let u = v(&[0.2]);
        let l = noisy.cost().eval(&x, &u).unwrap();
        let one = reinit_average_row(&noisy, &x, &u, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xi = noisy.draw_noise(&mut rng);
        let obs = observed_row(&x, &u, &noisy.step(&x, &u, &xi).unwrap(), 0.95, l).unwrap();
        let diff = one
            .coeffs
            .entries()
            .iter()
            .zip(obs.coeffs.entries())
            .map(|(a, b)| (a - b).abs());
        assert!(diff.fold(0.0, f64::max) < 1e-14);
        assert_eq!(one.provenance, Provenance::ReinitAverage);

        let det = reference();
        let r = reinit_average_row(&det, &x, &u, 17, &mut rng).unwrap();
        assert_eq!(r.coeffs, SymHalfVec::bilinear_coeffs(&h_matrix(&det, &x, &u).unwrap()));
        assert!(reinit_average_row(&det, &x, &u, 0, &mut rng).is_err());

        let err_at = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = reinit_average_g(&noisy, &x, &u, n, &mut rng).unwrap();
            (g - expected_g(&noisy, &x, &u).unwrap()).norm()
        };
        let mut small: Vec<f64> = (0..31).map(|s| err_at(100, s)).collect();
        let mut large: Vec<f64> = (0..31).map(|s| err_at(10_000, 100 + s)).collect();
        small.sort_by(f64::total_cmp);
        large.sort_by(f64::total_cmp);
        assert!(large[15] < small[15]);
    }

    #[test]
    fn mean_transition_row_examples() {
        let noisy = reference().with_sigma(DMatrix::identity(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_inputs(1, 20, &mut rng);
        let d = collect_rollout(&noisy, &random_vector(2, &mut rng), &u, &mut rng).unwrap();
        let tr = d.sample_mean();
        let row = mean_transition_row(&tr, 0.95, 1.0).unwrap();
        let direct = &tr.x_bar * tr.x_bar.transpose() - 0.95 * &tr.xplus_bar * tr.xplus_bar.transpose();
        assert_eq!(row.coeffs, SymHalfVec::bilinear_coeffs(&direct));
        assert_eq!(row.provenance, Provenance::DatasetAverage);

        let det = reference();
        let d = collect_rollout(&det, &v(&[1.0, 1.0]), &u, &mut rng).unwrap();
        let tr = d.sample_mean();
        let row = mean_transition_row(&tr, 0.95, 1.0).unwrap();
        let h = h_matrix(&det, &tr.x_bar, &tr.u_bar).unwrap();
        let want = SymHalfVec::bilinear_coeffs(&h);
        for (a, b) in row.coeffs.entries().iter().zip(want.entries()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rows_csv_round_trip() {
        let p = reference();
        let d = rollout(&p, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = synth_random_rows(&d, p.cost(), 0.95, 4, &mut rng, 1.0).unwrap();
        rows.extend(observed_rows(&d, p.cost(), 0.95).unwrap());
        let mut buf = Vec::new();
        write_rows_csv(&rows, 2, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("c_1_1,c_1_2,c_2_2,rhs,provenance\n"));
        let (n, back) = read_rows_csv(buf.as_slice()).unwrap();
        assert_eq!(n, 2);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.coeffs, b.coeffs);
            assert_eq!(a.rhs, b.rhs);
            assert_eq!(a.provenance, b.provenance);
        }
        assert!(read_rows_csv("c_1_1,rhs,provenance\n1,x,observed\n".as_bytes()).is_err());
        assert!(read_rows_csv("c_1_1,rhs,provenance\n1,1,bogus\n".as_bytes()).is_err());
        assert!(read_rows_csv("a,b,c,d\n".as_bytes()).is_err());
    }
}

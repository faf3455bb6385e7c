//! Transition datasets `(X, U, X⁺)`: collection, validation, merging,
//! group averaging and persistence of excitation.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, vstack};
use crate::lqsystem::ControlProblem;

/// Column-stacked states, inputs and successor states.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    xplus: DMatrix<f64>,
}

/// Arithmetic means of the three dataset blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeanTriple {
    pub x_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub xplus_bar: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, u: DMatrix<f64>, xplus: DMatrix<f64>) -> Result<Self> {
        let t = x.ncols();
        if t == 0 {
            return Err(Error::InvalidArgument("dataset must have at least one column".into()));
        }
        if u.ncols() != t || xplus.ncols() != t {
            return Err(Error::shape(
                "dataset columns",
                t,
                format!("U has {}, X+ has {}", u.ncols(), xplus.ncols()),
            ));
        }
        if xplus.nrows() != x.nrows() || x.nrows() == 0 || u.nrows() == 0 {
            return Err(Error::shape(
                "dataset rows",
                "X and X+ with n >= 1 rows, U with m >= 1 rows",
                format!("X {}, U {}, X+ {}", x.nrows(), u.nrows(), xplus.nrows()),
            ));
        }
        Ok(Self { x, u, xplus })
    }

    /// Builds a dataset from `(x, u, x⁺)` triples.
    pub fn from_columns(cols: &[(DVector<f64>, DVector<f64>, DVector<f64>)]) -> Result<Self> {
        let first = cols
            .first()
            .ok_or_else(|| Error::InvalidArgument("no columns".into()))?;
        let (n, m) = (first.0.len(), first.1.len());
        let t = cols.len();
        let mut x = DMatrix::zeros(n, t);
        let mut u = DMatrix::zeros(m, t);
        let mut xp = DMatrix::zeros(n, t);
        for (k, (xk, uk, xpk)) in cols.iter().enumerate() {
            if xk.len() != n || uk.len() != m || xpk.len() != n {
                return Err(Error::shape(
                    "dataset column",
                    format!("({n},{m},{n})"),
                    format!("({},{},{})", xk.len(), uk.len(), xpk.len()),
                ));
            }
            x.set_column(k, xk);
            u.set_column(k, uk);
            xp.set_column(k, xpk);
        }
        Self::new(x, u, xp)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn xplus(&self) -> &DMatrix<f64> {
        &self.xplus
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn column(&self, k: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            self.x.column(k).into_owned(),
            self.u.column(k).into_owned(),
            self.xplus.column(k).into_owned(),
        )
    }

    /// The `(n+m)×T` matrix `[X; U]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        vstack(&self.x, &self.u)
    }

    /// Whether `[X; U]` has full row rank `n + m`.
    pub fn rank_condition(&self, rtol: Option<f64>) -> bool {
        self.len() >= self.n() + self.m() && numerical_rank(&self.stacked(), rtol) == self.n() + self.m()
    }

    pub fn sample_mean(&self) -> SampleMeanTriple {
        SampleMeanTriple {
            x_bar: self.x.column_mean(),
            u_bar: self.u.column_mean(),
            xplus_bar: self.xplus.column_mean(),
        }
    }

    /// Column-wise concatenation of datasets sharing `n` and `m`.
    pub fn merge(datasets: &[Dataset]) -> Result<Dataset> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
        let (n, m) = (first.n(), first.m());
        if let Some(bad) = datasets.iter().find(|d| d.n() != n || d.m() != m) {
            return Err(Error::shape(
                "merge",
                format!("n={n}, m={m}"),
                format!("n={}, m={}", bad.n(), bad.m()),
            ));
        }
        let t: usize = datasets.iter().map(Dataset::len).sum();
        let mut x = DMatrix::zeros(n, t);
        let mut u = DMatrix::zeros(m, t);
        let mut xp = DMatrix::zeros(n, t);
        let mut off = 0;
        for d in datasets {
            x.columns_mut(off, d.len()).copy_from(&d.x);
            u.columns_mut(off, d.len()).copy_from(&d.u);
            xp.columns_mut(off, d.len()).copy_from(&d.xplus);
            off += d.len();
        }
        Dataset::new(x, u, xp)
    }

    /// Splits the columns into `groups` consecutive blocks of `group_size`
    /// and replaces each block by its mean column.
    pub fn partition_and_average(&self, groups: usize, group_size: usize) -> Result<Dataset> {
        if groups == 0 || group_size == 0 || groups * group_size != self.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset of length {} cannot be split into {groups} groups of {group_size}",
                self.len()
            )));
        }
        let avg = |mat: &DMatrix<f64>| {
            DMatrix::from_fn(mat.nrows(), groups, |i, g| {
                mat.row(i).columns(g * group_size, group_size).sum() / group_size as f64
            })
        };
        Dataset::new(avg(&self.x), avg(&self.u), avg(&self.xplus))
    }

    /// Maximum deviation from `X⁺ = AX + BU`.
    pub fn model_residual(&self, problem: &ControlProblem) -> f64 {
        let r = problem.a() * &self.x + problem.b() * &self.u - &self.xplus;
        r.amax()
    }

    fn header(n: usize, m: usize) -> Vec<String> {
        (1..=n)
            .map(|i| format!("x_{i}"))
            .chain((1..=m).map(|i| format!("u_{i}")))
            .chain((1..=n).map(|i| format!("xp_{i}")))
            .collect()
    }

    /// CSV with header `x_1..x_n,u_1..u_m,xp_1..xp_n`, one observation per
    /// line, values in shortest round-trip decimal form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wr.write_record(Self::header(self.n(), self.m()))?;
        for k in 0..self.len() {
            let rec: Vec<String> = self
                .x
                .column(k)
                .iter()
                .chain(self.u.column(k).iter())
                .chain(self.xplus.column(k).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rd.headers()?.clone();
        let count = |p: &str| header.iter().filter(|h| h.starts_with(p)).count();
        let (n, m) = (count("x_"), count("u_"));
        if n == 0 || m == 0 || count("xp_") != n || header.len() != 2 * n + m {
            return Err(Error::Parse(format!("unexpected dataset header: {header:?}")));
        }
        let expected = Self::header(n, m);
        if header.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Parse(format!("unexpected dataset header: {header:?}")));
        }
        let mut cols = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            if vals.len() != 2 * n + m {
                return Err(Error::Parse(format!("row {} has {} fields", line + 2, vals.len())));
            }
            cols.push((
                DVector::from_column_slice(&vals[..n]),
                DVector::from_column_slice(&vals[n..n + m]),
                DVector::from_column_slice(&vals[n + m..]),
            ));
        }
        Self::from_columns(&cols)
    }
}

/// I.i.d. standard normal input sequence.
pub fn random_inputs<R: Rng + ?Sized>(m: usize, len: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..len)
        .map(|_| DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

pub fn random_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Single rollout from `x0`; column `k` holds `(x^k, u^k, x^{k+1})`.
pub fn collect_rollout<R: Rng + ?Sized>(
    problem: &ControlProblem,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    rng: &mut R,
) -> Result<Dataset> {
    let traj = problem.simulate(x0, inputs, rng)?;
    let cols: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(k, u)| (traj[k].clone(), u.clone(), traj[k + 1].clone()))
        .collect();
    Dataset::from_columns(&cols)
}

/// One transition per requested `(x, u)`, initializing the system there.
pub fn collect_targeted<R: Rng + ?Sized>(
    problem: &ControlProblem,
    pairs: &[(DVector<f64>, DVector<f64>)],
    rng: &mut R,
) -> Result<Dataset> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no state-input pairs".into()));
    }
    let cols = pairs
        .iter()
        .map(|(x, u)| {
            let xi = problem.draw_noise(rng);
            Ok((x.clone(), u.clone(), problem.step(x, u, &xi)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_columns(&cols)
}

/// Standard-basis pairs `(e_i, 0)` and `(0, e_j)` spanning `R^{n+m}`.
pub fn basis_pairs(n: usize, m: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
    (0..n + m)
        .map(|k| {
            let mut z = DVector::zeros(n + m);
            z[k] = 1.0;
            (z.rows(0, n).into_owned(), z.rows(n, m).into_owned())
        })
        .collect()
}

/// Depth-`depth` block Hankel matrix of an input sequence.
pub fn hankel(inputs: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>> {
    let t = inputs.len();
    if depth == 0 || t < depth {
        return Err(Error::InvalidArgument(format!(
            "Hankel depth {depth} needs 1 <= depth <= sequence length {t}"
        )));
    }
    let m = inputs[0].len();
    if inputs.iter().any(|u| u.len() != m) {
        return Err(Error::shape("input sequence", m, "mixed dimensions"));
    }
    let cols = t - depth + 1;
    let mut h = DMatrix::zeros(m * depth, cols);
    for i in 0..depth {
        for j in 0..cols {
            h.view_mut((i * m, j), (m, 1)).copy_from(&inputs[i + j]);
        }
    }
    Ok(h)
}

/// Whether the depth-`order` Hankel matrix has full row rank `m·order`.
pub fn is_persistently_exciting(inputs: &[DVector<f64>], order: usize, rtol: Option<f64>) -> Result<bool> {
    let h = hankel(inputs, order)?;
    Ok(h.ncols() >= h.nrows() && numerical_rank(&h, rtol) == h.nrows())
}

/// Largest order for which the sequence is persistently exciting (0 if none).
pub fn excitation_order(inputs: &[DVector<f64>], rtol: Option<f64>) -> usize {
    let mut best = 0;
    for order in 1..=inputs.len() {
        match is_persistently_exciting(inputs, order, rtol) {
            Ok(true) => best = order,
            _ => break,
        }
    }
    best
}

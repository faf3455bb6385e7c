//! Reconstruction of an unknown quadratic stage cost from finitely many
//! cost observations.
//!
//! A square, invertible data basis `Z` (columns `z¹ … z^{n+m}` drawn from a
//! dataset) is chosen first. Observing `ℓ` at every `zⁱ` and every pairwise
//! sum `zⁱ + zʲ` gives the matrix of the associated bilinear form in that
//! basis through polarization, `β(a, b) = ½(ℓ(a+b) − ℓ(a) − ℓ(b))`. That
//! matrix is `L_XU = ZᵀLZ`, congruent to the unknown `L`, so the cost can be
//! evaluated in data coordinates or transformed back with `Z⁻¹`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::constraints::CostOracle;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{concat_vec, condition_number, numerical_rank, symmetrize};
use crate::lqsystem::StageCost;

/// Condition number of `Z` above which recovered costs are flagged.
pub const ILL_CONDITIONED: f64 = 1e8;

/// Columns of a dataset's `[X; U]` forming an invertible square basis.
#[derive(Debug, Clone)]
pub struct DataBasis {
    z: DMatrix<f64>,
    columns: Vec<usize>,
    n: usize,
}

impl DataBasis {
    /// Wraps an explicit square basis. Fails unless `Z` is invertible.
    pub fn from_matrix(z: DMatrix<f64>, n: usize) -> Result<Self> {
        if !z.is_square() || z.nrows() <= n {
            return Err(Error::shape(
                "basis",
                "square (n+m)x(n+m)",
                format!("{}x{}", z.nrows(), z.ncols()),
            ));
        }
        let rank = numerical_rank(&z, None);
        if rank < z.nrows() {
            return Err(Error::RankDeficient {
                rank,
                required: z.nrows(),
            });
        }
        let columns = (0..z.ncols()).collect();
        Ok(Self { z, columns, n })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Dataset column indices the basis was drawn from.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn condition(&self) -> f64 {
        condition_number(&self.z)
    }
}

/// Greedy pivoted selection of `n+m` dataset columns: at each step the
/// column whose component orthogonal to those already chosen is largest
/// relative to its own norm (ties to the lowest index). Relative residuals at
/// or below `rtol` (default `1e-10`) count as dependent. Selected columns
/// keep dataset order.
pub fn select_square_basis(dataset: &Dataset, rtol: Option<f64>) -> Result<DataBasis> {
    let stacked = dataset.stacked();
    let dim = stacked.nrows();
    let norms: Vec<f64> = stacked.column_iter().map(|c| c.norm()).collect();
    let rtol = rtol.unwrap_or(1e-10);
    let mut residual = stacked.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(dim);
    for step in 0..dim {
        // Score is the residual norm relative to the original column norm;
        // near-ties go to the lowest index.
        let score = |j: usize, r: &DMatrix<f64>| {
            if norms[j] > 0.0 {
                r.column(j).norm() / norms[j]
            } else {
                0.0
            }
        };
        let top = (0..residual.ncols())
            .filter(|j| !chosen.contains(j))
            .map(|j| score(j, &residual))
            .fold(0.0, f64::max);
        if top <= rtol {
            return Err(Error::RankDeficient {
                rank: step,
                required: dim,
            });
        }
        let j = (0..residual.ncols())
            .find(|&j| !chosen.contains(&j) && score(j, &residual) >= top * (1.0 - 1e-9))
            .unwrap();
        let nrm = residual.column(j).norm();
        chosen.push(j);
        let q = residual.column(j) / nrm;
        // Modified Gram-Schmidt against the new direction.
        for k in 0..residual.ncols() {
            let proj = q.dot(&residual.column(k));
            let mut col = residual.column_mut(k);
            col.axpy(-proj, &q, 1.0);
        }
    }
    chosen.sort_unstable();
    let z = DMatrix::from_fn(dim, dim, |i, k| stacked[(i, chosen[k])]);
    let rank = numerical_rank(&z, None);
    if rank < dim {
        return Err(Error::RankDeficient { rank, required: dim });
    }
    Ok(DataBasis {
        z,
        columns: chosen,
        n: dataset.n(),
    })
}

/// A point at which the cost must be observed: `zⁱ` when `i == j`,
/// otherwise `zⁱ + zʲ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub i: usize,
    pub j: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

/// The `(n+m)(n+m+1)/2` probe points: basis columns, then pairwise sums.
pub fn probe_requirements(basis: &DataBasis) -> Vec<Probe> {
    let d = basis.dim();
    let n = basis.n();
    let split = |z: DVector<f64>| (z.rows(0, n).into_owned(), z.rows(n, d - n).into_owned());
    let mut probes = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        let (x, u) = split(basis.z.column(i).into_owned());
        probes.push(Probe { i, j: i, x, u });
    }
    for i in 0..d {
        for j in i + 1..d {
            let (x, u) = split(basis.z.column(i) + basis.z.column(j));
            probes.push(Probe { i, j, x, u });
        }
    }
    probes
}

/// Observed costs keyed by probe `(i, j)`.
pub type CostObservations = BTreeMap<(usize, usize), f64>;

/// Prices every probe with a cost oracle (simulation-backed observation).
pub fn observe_probes(probes: &[Probe], oracle: &dyn CostOracle) -> Result<CostObservations> {
    probes
        .iter()
        .map(|p| Ok(((p.i, p.j), oracle.cost(&p.x, &p.u)?)))
        .collect()
}

/// Stage cost expressed in data coordinates.
#[derive(Debug, Clone)]
pub struct ReconstructedCost {
    basis: DataBasis,
    lu: LU<f64, Dyn, Dyn>,
    l_xu: DMatrix<f64>,
}

/// Result of transforming `L_XU` back to the original coordinates.
#[derive(Debug, Clone)]
pub struct RecoveredCost {
    pub cost: StageCost,
    pub condition: f64,
    /// Set when `cond(Z)` exceeds [`ILL_CONDITIONED`].
    pub ill_conditioned: bool,
}

/// Builds `L_XU` by polarization: diagonal `ℓ(zⁱ)`, off-diagonal
/// `½(ℓ(zⁱ+zʲ) − ℓ(zⁱ) − ℓ(zʲ))`.
pub fn build_l_xu(basis: &DataBasis, observations: &CostObservations) -> Result<ReconstructedCost> {
    let d = basis.dim();
    let get = |i: usize, j: usize| -> Result<f64> {
        let v = *observations.get(&(i, j)).ok_or(Error::IncompleteData(i, j))?;
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "observed cost at probe ({i}, {j}) is negative: {v}"
            )));
        }
        Ok(v)
    };
    let mut l_xu = DMatrix::zeros(d, d);
    for i in 0..d {
        l_xu[(i, i)] = get(i, i)?;
    }
    for i in 0..d {
        for j in i + 1..d {
            let b = 0.5 * (get(i, j)? - l_xu[(i, i)] - l_xu[(j, j)]);
            l_xu[(i, j)] = b;
            l_xu[(j, i)] = b;
        }
    }
    Ok(ReconstructedCost {
        lu: basis.z.clone().lu(),
        basis: basis.clone(),
        l_xu,
    })
}

impl ReconstructedCost {
    pub fn l_xu(&self) -> &DMatrix<f64> {
        &self.l_xu
    }

    pub fn basis(&self) -> &DataBasis {
        &self.basis
    }

    /// `αᵀ L_XU α` with `α = Z⁻¹[x; u]`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let n = self.basis.n();
        if x.len() != n || u.len() != self.basis.dim() - n {
            return Err(Error::shape(
                "reconstructed cost evaluation",
                format!("x in R^{n}, u in R^{}", self.basis.dim() - n),
                format!("x in R^{}, u in R^{}", x.len(), u.len()),
            ));
        }
        let alpha = self.lu.solve(&concat_vec(x, u)).ok_or(Error::Singular("data basis"))?;
        Ok(alpha.dot(&(&self.l_xu * &alpha)))
    }

    /// `L = Z⁻ᵀ L_XU Z⁻¹`, symmetrized.
    pub fn recover_l(&self) -> Result<RecoveredCost> {
        let zinv = self.lu.try_inverse().ok_or(Error::Singular("data basis"))?;
        let l = symmetrize(&(zinv.transpose() * &self.l_xu * zinv));
        let condition = self.basis.condition();
        Ok(RecoveredCost {
            cost: StageCost::new_unchecked(l, self.basis.n())?,
            condition,
            ill_conditioned: !(condition <= ILL_CONDITIONED),
        })
    }
}

impl CostOracle for ReconstructedCost {
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.eval(x, u)
    }
}

/// Probe CSV: `i,j,x_1..x_n,u_1..u_m[,cost]`.
pub fn write_probes_csv<W: Write>(probes: &[Probe], observations: Option<&CostObservations>, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let (n, m) = probes.first().map_or((0, 0), |p| (p.x.len(), p.u.len()));
    let mut header = vec!["i".to_string(), "j".to_string()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    header.extend((1..=m).map(|k| format!("u_{k}")));
    if observations.is_some() {
        header.push("cost".into());
    }
    wr.write_record(&header)?;
    for p in probes {
        let mut rec = vec![p.i.to_string(), p.j.to_string()];
        rec.extend(p.x.iter().chain(p.u.iter()).map(|v| format!("{v:?}")));
        if let Some(obs) = observations {
            let c = obs.get(&(p.i, p.j)).ok_or(Error::IncompleteData(p.i, p.j))?;
            rec.push(format!("{c:?}"));
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the `cost` column of a probe CSV into observations.
pub fn read_observations_csv<R: Read>(r: R) -> Result<CostObservations> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers()?.clone();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let (pi, pj, pc) = match (pos("i"), pos("j"), pos("cost")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Parse("observation CSV needs i, j and cost columns".into())),
    };
    let mut out = CostObservations::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("row {}: {e}", line + 2));
        let i: usize = rec.get(pi).unwrap_or("").parse().map_err(|e| bad(&e))?;
        let j: usize = rec.get(pj).unwrap_or("").parse().map_err(|e| bad(&e))?;
        let c: f64 = rec.get(pc).unwrap_or("").parse().map_err(|e| bad(&e))?;
        out.insert((i.min(j), i.max(j)), c);
    }
    Ok(out)
}

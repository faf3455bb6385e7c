//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector};

/// Numerical rank from singular values.
///
/// Singular values at or below `rtol * sigma_max` count as zero. Without an
/// explicit `rtol` the threshold is `max(rows, cols) * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: Option<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let rtol = rtol.unwrap_or(m.nrows().max(m.ncols()) as f64 * f64::EPSILON);
    let thresh = rtol * smax;
    sv.iter().filter(|&&s| s > thresh).count()
}

/// 2-norm condition number; infinite for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn sup_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && sup_norm(&(m - m.transpose())) <= tol * sup_norm(m).max(1.0)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Symmetric square root factor `S` with `S Sᵀ = M` for a PSD matrix.
/// Negative eigenvalues (round-off) are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Vertically stack two column-compatible matrices.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

pub fn concat_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

pub(crate) fn mat_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

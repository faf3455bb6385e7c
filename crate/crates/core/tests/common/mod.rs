//! Independent reference computations and random instance generators shared
//! by the integration tests and the acceptance harness.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gauss_vec<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random PSD matrix with a positive-definite trailing `m×m` block.
pub fn random_cost<R: Rng>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let d = n + m;
    let g = gauss(d, d, rng);
    let mut l = &g * g.transpose() / d as f64;
    for k in n..d {
        l[(k, k)] += 0.1;
    }
    0.5 * (&l + l.transpose())
}

/// `[x;u]ᵀ L [x;u]` written out directly.
pub fn quad_cost(l: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    (z.transpose() * l * &z)[(0, 0)]
}

/// `H = xxᵀ − γ(Ax+Bu)(Ax+Bu)ᵀ` from the model.
pub fn model_h(a: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let next = a * x + b * u;
    x * x.transpose() - gamma * &next * next.transpose()
}

/// Coefficients of `tr(H P)` in the half-vector ordering `(1,1),(1,2),…`.
pub fn trace_coeffs(h: &DMatrix<f64>) -> Vec<f64> {
    let p = h.nrows();
    let mut out = Vec::new();
    for i in 0..p {
        for j in i..p {
            out.push(if i == j { h[(i, i)] } else { h[(i, j)] + h[(j, i)] });
        }
    }
    out
}

/// One application of the discounted Riccati map, written out directly.
pub fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    gamma: f64,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let lxx = l.view((0, 0), (n, n));
    let lxu = l.view((0, n), (n, m));
    let luu = l.view((n, n), (m, m));
    let s = luu + gamma * b.transpose() * p * b;
    let cross = lxu + gamma * a.transpose() * p * b;
    let inv = s.try_inverse().expect("invertible input weight");
    lxx + gamma * a.transpose() * p * a - &cross * inv * cross.transpose()
}

/// Outcome of the brute-force LP oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum Vertex {
    Unbounded,
    Optimal(f64),
}

fn subsets(k: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, total: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..total {
            cur.push(i);
            rec(i + 1, k, total, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, total, &mut Vec::new(), &mut out);
    out
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let tol = 1e-10 * sv.max().max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Exhaustive solution of `max cᵀy, Ay ≤ b` (`b ≥ 0`, `y` free).
///
/// Bounded iff `c` is a nonnegative combination of rows (Farkas). The
/// optimum is then attained at a basic solution: `r = rank(A)` independent
/// rows held tight, with `y` taken in the row space of `A`.
pub fn vertex_enumeration(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Vertex {
    let d = c.len();
    let k = a.len();
    let cv = DVector::from_column_slice(c);
    let amat = DMatrix::from_fn(k, d, |i, j| a[i][j]);
    let r = rank(&amat);

    // Cone membership over independent row subsets (Carathéodory).
    let mut in_cone = cv.norm() == 0.0;
    for size in 1..=r.min(d) {
        if in_cone {
            break;
        }
        for s in subsets(size, k) {
            let sub = DMatrix::from_fn(d, size, |i, j| a[s[j]][i]);
            if rank(&sub) < size {
                continue;
            }
            let lam = sub.clone().svd(true, true).solve(&cv, 1e-14).unwrap();
            let resid = (&sub * &lam - &cv).norm();
            if resid <= 1e-9 * cv.norm().max(1.0) && lam.iter().all(|&l| l >= -1e-12) {
                in_cone = true;
                break;
            }
        }
    }
    if !in_cone {
        return Vertex::Unbounded;
    }
    if r == 0 {
        return Vertex::Optimal(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for s in subsets(r, k) {
        let sub = DMatrix::from_fn(r, d, |i, j| a[s[i]][j]);
        if rank(&sub) < r {
            continue;
        }
        let rhs = DVector::from_iterator(r, s.iter().map(|&i| b[i]));
        let y = sub.clone().svd(true, true).solve(&rhs, 1e-14).unwrap();
        let feasible = (0..k).all(|i| {
            let lhs: f64 = (0..d).map(|j| a[i][j] * y[j]).sum();
            lhs <= b[i] + 1e-9
        });
        if feasible {
            best = best.max(cv.dot(&y));
        }
    }
    Vertex::Optimal(best)
}

/// Random stabilizable-looking system with spectral radius around one.
pub fn random_system<R: Rng>(n: usize, m: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = gauss(n, n, rng) / (n as f64).sqrt();
    let b = gauss(n, m, rng);
    (a, b)
}

/// Smallest singular value of `[B, AB, …, Aⁿ⁻¹B]`, scaled by the largest.
pub fn controllability_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let m = b.ncols();
    let mut c = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        c.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    let sv = c.svd(false, false).singular_values;
    sv.min() / sv.max()
}

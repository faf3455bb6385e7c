//! Discounted linear-quadratic problem instances and their model-based
//! ground truth: transitions, stage costs, the Riccati fixed point, greedy
//! gains and policy evaluation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, concat_vec, min_eigenvalue, spectral_radius, sup_norm, symmetrize};

/// Tolerance used when validating symmetry and semidefiniteness of inputs.
const VALIDATION_TOL: f64 = 1e-9;

/// Quadratic stage cost `ℓ(x,u) = [x;u]ᵀ L [x;u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    l: DMatrix<f64>,
    n: usize,
}

impl StageCost {
    /// Validating constructor: `L` symmetric PSD with `L_uu ≻ 0`.
    pub fn new(l: DMatrix<f64>, n: usize) -> Result<Self> {
        let cost = Self::new_unchecked(l, n)?;
        cost.validate()?;
        Ok(cost)
    }

    /// Checks shapes only. Used for reconstructed costs that may carry
    /// round-off or come from bad observations.
    pub fn new_unchecked(l: DMatrix<f64>, n: usize) -> Result<Self> {
        if !l.is_square() || l.nrows() <= n {
            return Err(Error::shape(
                "stage cost",
                format!("square matrix larger than {n}"),
                format!("{}x{}", l.nrows(), l.ncols()),
            ));
        }
        Ok(Self { l, n })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            l: DMatrix::identity(n + m, n + m),
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scale = sup_norm(&self.l).max(1.0);
        if !linalg::is_symmetric(&self.l, VALIDATION_TOL) {
            return Err(Error::InvalidArgument("stage cost matrix is not symmetric".into()));
        }
        if min_eigenvalue(&self.l) < -VALIDATION_TOL * scale {
            return Err(Error::InvalidArgument("stage cost matrix is not PSD".into()));
        }
        if self.m() == 0 || min_eigenvalue(&self.luu()) <= VALIDATION_TOL * scale {
            return Err(Error::InvalidArgument("L_uu is not positive definite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.l.nrows() - self.n
    }

    pub fn lxx(&self) -> DMatrix<f64> {
        self.l.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn lxu(&self) -> DMatrix<f64> {
        self.l.view((0, self.n), (self.n, self.m())).into_owned()
    }

    pub fn luu(&self) -> DMatrix<f64> {
        self.l.view((self.n, self.n), (self.m(), self.m())).into_owned()
    }

    /// Evaluates the quadratic form at `(x, u)`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        if x.len() != self.n || u.len() != self.m() {
            return Err(Error::shape(
                "stage cost evaluation",
                format!("x in R^{}, u in R^{}", self.n, self.m()),
                format!("x in R^{}, u in R^{}", x.len(), u.len()),
            ));
        }
        let z = concat_vec(x, u);
        Ok(z.dot(&(&self.l * &z)))
    }
}

/// Quadratic value function `v(x) = xᵀPx + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub p: DMatrix<f64>,
    pub e: f64,
}

impl QuadraticValue {
    pub fn new(p: DMatrix<f64>, e: f64) -> Self {
        Self { p, e }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x)) + self.e
    }
}

/// Linear state feedback `u = Kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGain {
    pub k: DMatrix<f64>,
}

impl PolicyGain {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            k: DMatrix::zeros(m, n),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * x
    }
}

/// Steps within the relative tolerance before [`ControlProblem::solve_are`]
/// gives up on the absolute one.
pub const STALL_STEPS: usize = 1000;

/// Options for the Riccati fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct AreOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
        }
    }
}

/// Ground truth from [`ControlProblem::solve_are`].
#[derive(Debug, Clone)]
pub struct AreSolution {
    pub value: QuadraticValue,
    pub gain: PolicyGain,
    pub residual: f64,
    pub iterations: usize,
}

/// A discounted LQ problem: `x⁺ = Ax + Bu + ξ`, `ξ ~ (0, Σ)`.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    noise_factor: Option<DMatrix<f64>>,
    gamma: f64,
    cost: StageCost,
}

impl ControlProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma: DMatrix<f64>, gamma: f64, cost: StageCost) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::shape("A", "nonempty square matrix", dims(&a)));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::shape("B", format!("{n}xm with m >= 1"), dims(&b)));
        }
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::shape("Sigma", format!("{n}x{n}"), dims(&sigma)));
        }
        if cost.n() != n || cost.m() != b.ncols() {
            return Err(Error::shape(
                "L",
                format!("{0}x{0}", n + b.ncols()),
                dims(cost.matrix()),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount factor must lie in (0,1), got {gamma}"
            )));
        }
        if !linalg::is_symmetric(&sigma, VALIDATION_TOL) {
            return Err(Error::InvalidArgument("Sigma is not symmetric".into()));
        }
        if min_eigenvalue(&sigma) < -VALIDATION_TOL * sup_norm(&sigma).max(1.0) {
            return Err(Error::InvalidArgument("Sigma is not PSD".into()));
        }
        cost.validate()?;
        let noise_factor = if sigma.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(linalg::psd_factor(&sigma))
        };
        Ok(Self {
            a,
            b,
            sigma,
            noise_factor,
            gamma,
            cost,
        })
    }

    pub fn deterministic(a: DMatrix<f64>, b: DMatrix<f64>, gamma: f64, cost: StageCost) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, DMatrix::zeros(n, n), gamma, cost)
    }

    /// Two-state, single-input benchmark system
    /// `A = [[1, 0.1], [0.5, -0.5]]`, `B = [1; 0.5]` with `L = I`.
    pub fn reference(gamma: f64) -> Result<Self> {
        Self::deterministic(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.5, -0.5]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            gamma,
            StageCost::identity(2, 1),
        )
    }

    /// Same problem with a different noise covariance.
    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma, self.gamma, self.cost.clone())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost(&self) -> &StageCost {
        &self.cost
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_deterministic(&self) -> bool {
        self.noise_factor.is_none()
    }

    fn check_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() || u.len() != self.m() {
            return Err(Error::shape(
                "state/input",
                format!("x in R^{}, u in R^{}", self.n(), self.m()),
                format!("x in R^{}, u in R^{}", x.len(), u.len()),
            ));
        }
        Ok(())
    }

    /// Noise-free part of the transition, `Ax + Bu`.
    pub fn mean_next(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        Ok(&self.a * x + &self.b * u)
    }

    /// One transition `Ax + Bu + ξ`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if xi.len() != self.n() {
            return Err(Error::shape("noise", self.n(), xi.len()));
        }
        Ok(self.mean_next(x, u)? + xi)
    }

    /// Draws `ξ` with covariance `Σ`. Consumes no randomness when `Σ = 0`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.noise_factor {
            None => DVector::zeros(self.n()),
            Some(s) => {
                let w = DVector::from_fn(self.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
                s * w
            }
        }
    }

    /// Rolls the system forward from `x0` under `inputs`; returns `T + 1` states.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        if x0.len() != self.n() {
            return Err(Error::shape("initial state", self.n(), x0.len()));
        }
        let mut traj = Vec::with_capacity(inputs.len() + 1);
        traj.push(x0.clone());
        for u in inputs {
            let xi = self.draw_noise(rng);
            let next = self.step(traj.last().unwrap(), u, &xi)?;
            traj.push(next);
        }
        Ok(traj)
    }

    /// One application of the discounted Riccati map.
    pub fn riccati_map(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let g = self.gamma;
        let at_p = self.a.transpose() * p;
        let inner = self.cost.luu() + g * self.b.transpose() * p * &self.b;
        let cross = self.cost.lxu() + g * &at_p * &self.b;
        let sol = inner
            .lu()
            .solve(&cross.transpose())
            .ok_or(Error::Singular("Riccati map"))?;
        let next = self.cost.lxx() + g * at_p * &self.a - cross * sol;
        Ok(symmetrize(&next))
    }

    /// Sup-norm residual of the discounted Riccati equation at `P`.
    pub fn riccati_residual(&self, p: &DMatrix<f64>) -> Result<f64> {
        Ok(sup_norm(&(self.riccati_map(p)? - p)))
    }

    /// Optimal value and gain by fixed-point iteration on the discounted
    /// Riccati recursion, started from `P = 0`.
    ///
    /// Stops once the step and the residual are both at most `tol`. When
    /// `‖P‖` is large enough that rounding keeps the step above `tol`, the
    /// iterate is accepted after [`STALL_STEPS`] consecutive steps within
    /// `tol·‖P‖`.
    pub fn solve_are(&self, opts: AreOptions) -> Result<AreSolution> {
        let n = self.n();
        let mut p = DMatrix::zeros(n, n);
        let mut diff = f64::INFINITY;
        let mut stalled = 0;
        for it in 1..=opts.max_iter {
            let next = self.riccati_map(&p)?;
            diff = sup_norm(&(&next - &p));
            p = next;
            if !diff.is_finite() {
                break;
            }
            let scaled = opts.tol * sup_norm(&p).max(1.0);
            stalled = if diff <= scaled { stalled + 1 } else { 0 };
            if diff <= opts.tol || stalled >= STALL_STEPS {
                let residual = self.riccati_residual(&p)?;
                if residual <= opts.tol || (stalled >= STALL_STEPS && residual <= scaled) {
                    let e = self.constant_offset(&p);
                    let value = QuadraticValue::new(p, e);
                    let gain = self.greedy_gain(&value)?;
                    return Ok(AreSolution {
                        value,
                        gain,
                        residual,
                        iterations: it,
                    });
                }
            }
        }
        Err(Error::Divergence {
            what: "Riccati iteration",
            iterations: opts.max_iter,
            residual: diff,
        })
    }

    /// `γ/(1−γ)·tr(PΣ)`, the constant part of a quadratic value under noise.
    pub fn constant_offset(&self, p: &DMatrix<f64>) -> f64 {
        self.gamma / (1.0 - self.gamma) * (p * &self.sigma).trace()
    }

    /// Minimizer of `u ↦ ℓ(x,u) + γ(Ax+Bu)ᵀP(Ax+Bu)`:
    /// `K = −(L_uu + γBᵀPB)⁻¹(L_xuᵀ + γBᵀPA)`.
    pub fn greedy_gain(&self, v: &QuadraticValue) -> Result<PolicyGain> {
        if v.p.nrows() != self.n() || v.p.ncols() != self.n() {
            return Err(Error::shape("value matrix", format!("{0}x{0}", self.n()), dims(&v.p)));
        }
        let g = self.gamma;
        let bt_p = self.b.transpose() * &v.p;
        let inner = self.cost.luu() + g * &bt_p * &self.b;
        let rhs = self.cost.lxu().transpose() + g * &bt_p * &self.a;
        let scale = self.cost.luu().norm() + g * (&bt_p * &self.b).norm();
        let smin = inner.singular_values().min();
        if !(smin > 1e-12 * scale) {
            return Err(Error::Singular("greedy gain"));
        }
        let k = inner.lu().solve(&rhs).ok_or(Error::Singular("greedy gain"))?;
        Ok(PolicyGain::new(-k))
    }

    pub fn closed_loop(&self, k: &PolicyGain) -> DMatrix<f64> {
        &self.a + &self.b * &k.k
    }

    /// Per-step cost matrix of the closed loop:
    /// `L(K) = L_xx + L_xu K + KᵀL_xuᵀ + KᵀL_uu K`.
    pub fn policy_cost(&self, k: &PolicyGain) -> DMatrix<f64> {
        let lxu_k = self.cost.lxu() * &k.k;
        let m = self.cost.lxx() + &lxu_k + lxu_k.transpose() + k.k.transpose() * self.cost.luu() * &k.k;
        symmetrize(&m)
    }

    /// Value of the linear policy `u = Kx`, solving the discounted Lyapunov
    /// equation `P = L(K) + γ(A+BK)ᵀP(A+BK)` directly, followed by iterative
    /// refinement until the residual is at most `tol·max(1, ‖P‖)`.
    pub fn evaluate_policy(&self, k: &PolicyGain, tol: f64) -> Result<QuadraticValue> {
        let n = self.n();
        if k.k.nrows() != self.m() || k.k.ncols() != n {
            return Err(Error::shape("gain", format!("{}x{}", self.m(), n), dims(&k.k)));
        }
        let acl = self.closed_loop(k);
        let rho = self.gamma.sqrt() * spectral_radius(&acl);
        if rho >= 1.0 {
            return Err(Error::Divergence {
                what: "policy evaluation (closed loop not discounted-stable)",
                iterations: 0,
                residual: rho,
            });
        }
        let lk = self.policy_cost(k);
        // vec(AᵀPA) = (Aᵀ ⊗ Aᵀ) vec(P) in column-major vec.
        let at = acl.transpose();
        let kron = at.kronecker(&at);
        let op = DMatrix::identity(n * n, n * n) - self.gamma * kron;
        let lu = op.lu();
        let lyap = |p: &DMatrix<f64>| -> DMatrix<f64> { &lk + self.gamma * acl.transpose() * p * &acl };
        let mut p = DMatrix::zeros(n, n);
        let mut residual = f64::INFINITY;
        for _ in 0..8 {
            let r = lyap(&p) - &p;
            residual = sup_norm(&r);
            if residual <= tol * sup_norm(&p).max(1.0) {
                break;
            }
            let rv = DVector::from_column_slice(r.as_slice());
            let dv = lu.solve(&rv).ok_or(Error::Singular("policy evaluation"))?;
            p = symmetrize(&(p + DMatrix::from_column_slice(n, n, dv.as_slice())));
        }
        let scaled = tol * sup_norm(&p).max(1.0);
        if residual > scaled {
            residual = sup_norm(&(lyap(&p) - &p));
            if residual > scaled {
                return Err(Error::Divergence {
                    what: "policy evaluation refinement",
                    iterations: 8,
                    residual,
                });
            }
        }
        let e = self.constant_offset(&p);
        Ok(QuadraticValue::new(p, e))
    }
}

fn dims(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

//! Residual polynomials of gradient methods on quadratics.
//!
//! A gradient method is described by coefficients `c_i^{(N)}`; at step `N`
//!
//! ```text
//! z_{N+1} = z_N + Σ_{i<N} c_i^{(N)} (z_{i+1} − z_i) + c_N^{(N)} ∇F(z_N)
//! ```
//!
//! and on a quadratic with Hessian `H` the error obeys
//! `z_N − z* = P_N(H)(z_0 − z*)` with
//!
//! ```text
//! P_{N+1}(λ) = (1 + c_N^{(N)} λ) P_N(λ) + Σ_{i<N} c_i^{(N)} (P_{i+1}(λ) − P_i(λ)),  P_0 = 1.
//! ```
//!
//! Plain gradient descent is `c_N^{(N)} = −η`; heavy-ball momentum adds
//! `c_{N−1}^{(N)} = m`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::inner::{AffineInnerProblem, Horizon, LinearProcedure};
use crate::linops::{self, Matrix, Vector};
use crate::{Error, Result};

/// Coefficient rows: row `N` holds `[c_0^{(N)}, …, c_N^{(N)}]`, the last
/// entry being the gradient coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSchedule {
    rows: Vec<Vec<f64>>,
}

impl CoefficientSchedule {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (n, row) in rows.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(Error::InvalidParameter(format!(
                    "schedule row {n} must hold {} coefficients, found {}",
                    n + 1,
                    row.len()
                )));
            }
            if !row.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite("coefficient schedule"));
            }
        }
        Ok(Self { rows })
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientMethod {
    PlainGd {
        eta: f64,
    },
    /// Heavy ball: `z_{N+1} = z_N − η∇F(z_N) + m (z_N − z_{N−1})` for
    /// `N ≥ 1`, started with `z_1 = z_0 − η/(1 + m) ∇F(z_0)`. With this start
    /// `|P_N| ≤ m^{N/2} (1 + N (1 − m)/(1 + m))` on the robust region.
    Momentum {
        eta: f64,
        momentum: f64,
    },
    Custom(CoefficientSchedule),
}

impl GradientMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GradientMethod::PlainGd { eta } => positive_step(eta),
            GradientMethod::Momentum { eta, momentum } => {
                positive_step(eta)?;
                if (0.0..1.0).contains(&momentum) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "momentum must lie in [0, 1), got {momentum}"
                    )))
                }
            }
            GradientMethod::Custom(_) => Ok(()),
        }
    }

    /// `c_i^{(step)}`.
    pub fn coefficient(&self, step: usize, i: usize) -> f64 {
        debug_assert!(i <= step);
        match self {
            GradientMethod::PlainGd { eta } => {
                if i == step {
                    -eta
                } else {
                    0.0
                }
            }
            GradientMethod::Momentum { eta, momentum } => {
                if step == 0 {
                    -eta / (1.0 + momentum)
                } else if i == step {
                    -eta
                } else if i + 1 == step {
                    *momentum
                } else {
                    0.0
                }
            }
            GradientMethod::Custom(s) => s.rows[step][i],
        }
    }

    /// Whether the method is known to converge on a spectrum contained in
    /// `(0, λ_max]`. Custom schedules carry no such guarantee.
    pub fn converges_on(&self, lambda_max: f64) -> Option<bool> {
        match *self {
            GradientMethod::PlainGd { eta } => Some(eta * lambda_max < 2.0),
            GradientMethod::Momentum { eta, momentum } => {
                Some(eta * lambda_max <= 2.0 * (1.0 + momentum))
            }
            GradientMethod::Custom(_) => None,
        }
    }

    fn max_steps(&self) -> Option<usize> {
        match self {
            GradientMethod::Custom(s) => Some(s.steps()),
            _ => None,
        }
    }
}

fn positive_step(eta: f64) -> Result<()> {
    if eta.is_finite() && eta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "step size must be positive, got {eta}"
        )))
    }
}

/// `P_N` of a gradient method.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPolynomial {
    method: GradientMethod,
    degree: usize,
}

pub fn residual_poly(method: GradientMethod, n: usize) -> Result<ResidualPolynomial> {
    method.validate()?;
    if let Some(max) = method.max_steps() {
        if n > max {
            return Err(Error::InvalidParameter(format!(
                "schedule covers {max} steps, degree {n} requested"
            )));
        }
    }
    Ok(ResidualPolynomial { method, degree: n })
}

/// Ring operations needed to run the recursion on scalars or matrices.
trait Recursable: Clone {
    fn one_like(&self) -> Self;
    fn times_arg(&self, arg: &Self) -> Self;
    fn axpy(&mut self, alpha: f64, x: &Self);
}

impl Recursable for f64 {
    fn one_like(&self) -> Self {
        1.0
    }
    fn times_arg(&self, arg: &Self) -> Self {
        self * arg
    }
    fn axpy(&mut self, alpha: f64, x: &Self) {
        *self += alpha * x;
    }
}

impl Recursable for Matrix {
    fn one_like(&self) -> Self {
        Matrix::identity(self.nrows(), self.ncols())
    }
    fn times_arg(&self, arg: &Self) -> Self {
        self * arg
    }
    fn axpy(&mut self, alpha: f64, x: &Self) {
        *self += x * alpha;
    }
}

impl ResidualPolynomial {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn method(&self) -> &GradientMethod {
        &self.method
    }

    fn recurse<T: Recursable>(&self, arg: &T) -> T {
        let one = arg.one_like();
        if let GradientMethod::PlainGd { .. } = self.method {
            // Only the previous polynomial is needed.
            let mut p = one;
            for step in 0..self.degree {
                let c = self.method.coefficient(step, step);
                let scaled = p.times_arg(arg);
                p.axpy(c, &scaled);
            }
            return p;
        }
        if let GradientMethod::Momentum { eta, momentum } = self.method {
            // Three-term form: P_{N+1} = (1 + m) P_N − η λ P_N − m P_{N−1}.
            if self.degree == 0 {
                return one;
            }
            let mut prev = one.clone();
            let mut cur = one;
            cur.axpy(-eta / (1.0 + momentum), &prev.times_arg(arg));
            for _ in 1..self.degree {
                let mut next = cur.clone();
                next.axpy(momentum, &cur);
                next.axpy(-eta, &cur.times_arg(arg));
                next.axpy(-momentum, &prev);
                prev = cur;
                cur = next;
            }
            return cur;
        }
        let mut history: Vec<T> = vec![one];
        for step in 0..self.degree {
            let p_n = &history[step];
            let mut next = p_n.clone();
            next.axpy(self.method.coefficient(step, step), &p_n.times_arg(arg));
            for i in 0..step {
                let c = self.method.coefficient(step, i);
                if c != 0.0 {
                    next.axpy(c, &history[i + 1]);
                    next.axpy(-c, &history[i]);
                }
            }
            history.push(next);
        }
        history.pop().expect("P_0 is always present")
    }

    /// `P_N(λ)`.
    pub fn eval(&self, lambda: f64) -> f64 {
        match self.method {
            GradientMethod::PlainGd { eta } => libm::pow(1.0 - eta * lambda, self.degree as f64),
            _ => self.recurse(&lambda),
        }
    }

    /// `P_N(λ)` computed through the recursion even when a closed form exists.
    pub fn eval_by_recursion(&self, lambda: f64) -> f64 {
        self.recurse(&lambda)
    }

    /// `P_N(M)` by the same recursion on matrices.
    pub fn eval_matrix(&self, m: &Matrix) -> Result<Matrix> {
        linops::ensure_square(m, "polynomial argument")?;
        match self.method {
            GradientMethod::PlainGd { eta } => {
                let d = m.nrows();
                linops::mat_pow(&(Matrix::identity(d, d) - m * eta), self.degree)
            }
            _ => Ok(self.recurse(m)),
        }
    }

    /// `max |P_N(λ)|` over the given points.
    pub fn max_abs_on(&self, grid: &[f64]) -> f64 {
        grid.iter().map(|&l| self.eval(l).abs()).fold(0.0, f64::max)
    }
}

/// `points` evenly spaced values covering `[lo, hi]`, endpoints included.
pub fn spectrum_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Interval `[(1 − √m)², (1 + √m)²] / η` on which heavy ball with momentum
/// `m` and step `η` has `|P_N(λ)| ≤ m^{N/2}(1 + N(1 − m)/(1 + m))`.
pub fn momentum_robust_region(eta: f64, momentum: f64) -> (f64, f64) {
    let s = libm::sqrt(momentum);
    ((1.0 - s) * (1.0 - s) / eta, (1.0 + s) * (1.0 + s) / eta)
}

/// `z_N = P_N(H) z_0 + (P_N(H) − I) H† Kᵀ c` with `H = KᵀK`: the `N`-th
/// iterate of the method on `F(z) = ½‖Kz + c‖²`.
pub fn quadratic_iterate(
    k: &Matrix,
    c: &Vector,
    z0: &Vector,
    poly: &ResidualPolynomial,
) -> Result<Vector> {
    linops::ensure_len(c, k.nrows(), "c")?;
    linops::ensure_len(z0, k.ncols(), "z0")?;
    let h = k.transpose() * k;
    let p = poly.eval_matrix(&h)?;
    let d = h.nrows();
    let minimizer_part = linops::pinv(&h)? * (k.transpose() * c);
    Ok(&p * z0 + (p - Matrix::identity(d, d)) * minimizer_part)
}

/// Left-hand side `m^{N/2} (1 + (1 − m)/(1 + mN))` of the momentum
/// convergence condition.
pub fn momentum_condition(momentum: f64, n: usize) -> f64 {
    let n = n as f64;
    libm::pow(momentum, n / 2.0) * (1.0 + (1.0 - momentum) / (1.0 + momentum * n))
}

/// Smallest `N₀` with `m^{N₀/2} (1 + (1 − m)/(1 + m N₀)) < 1`.
pub fn momentum_n0(momentum: f64) -> Result<usize> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "momentum must lie in (0, 1), got {momentum}"
        )));
    }
    // The condition fails at N = 0 (value 2 − m) and the left-hand side
    // tends to 0, so the scan terminates.
    let mut n = 0;
    while momentum_condition(momentum, n) >= 1.0 {
        n += 1;
    }
    Ok(n)
}

/// Time-invertible linear procedure of a gradient method minimizing
/// `F(z, θ) = ½‖K_in z + Uθ + c‖²`:
/// `E_N = (P_N(H̄) − I) H̄⁻¹` with `H̄ = K_in K_inᵀ`, and
/// `r_N = P_N(H) z_0 + (P_N(H) − I) H† K_inᵀ c` with `H = K_inᵀ K_in`.
pub fn procedure_from_quadratic(
    k_in: &Matrix,
    u: &Matrix,
    c: &Vector,
    method: GradientMethod,
    z0: &Vector,
    n: usize,
) -> Result<LinearProcedure> {
    let problem = AffineInnerProblem::new(k_in.clone(), k_in.clone(), u.clone(), c.clone())?;
    let v = problem.validate();
    if !v.surjective {
        return Err(Error::InvalidProblem(v.issues.join("; ")));
    }
    linops::ensure_len(z0, k_in.ncols(), "z0")?;
    let h_bar = k_in * k_in.transpose();
    let lambda_max = linops::spectrum(&h_bar)?.spectral_radius;
    if method.converges_on(lambda_max) == Some(false) {
        return Err(Error::InvalidParameter(format!(
            "method diverges on a spectrum reaching {lambda_max}"
        )));
    }
    let eta = match method {
        GradientMethod::PlainGd { eta } | GradientMethod::Momentum { eta, .. } => Some(eta),
        GradientMethod::Custom(_) => None,
    };
    let poly = residual_poly(method, n)?;
    let d_x = h_bar.nrows();
    let e_n = (poly.eval_matrix(&h_bar)? - Matrix::identity(d_x, d_x))
        * linops::inverse(&h_bar, "K_in K_in^T")?;
    let r_n = quadratic_iterate(k_in, c, z0, &poly)?;
    LinearProcedure::from_parts(problem, e_n, r_n, Horizon::Steps(n), eta)
}

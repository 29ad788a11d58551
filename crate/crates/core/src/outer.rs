//! Quadratic outer losses `ℓ(z) = ½‖K_out z − ω‖²` and the outer trainers.
//!
//! With `z_N(θ) = A_N θ + r_N` the training objective is the least-squares
//! problem `φ(θ) = ½‖K_out A_N θ + v_N‖²`, `v_N = K_out r_N − ω`. Three
//! trainers solve it:
//!
//! - closed form: the minimum-norm minimizer `−(K_out A_N)† v_N`,
//! - unrolled gradient descent on `φ` with its exact gradient,
//! - implicit-differentiation descent, which replaces the unrolled Jacobian
//!   by `−(∂_z f)† ∂_θ f` evaluated at `z_N`.

use alloc::format;
use alloc::string::String;

use crate::inner::{AffineInnerProblem, Horizon, LinearProcedure};
use crate::linops::{self, Matrix, Vector};
use crate::{Error, Result};

/// Closed-form solutions must satisfy the optimality characterization to
/// this relative residual.
pub const CHARACTERIZATION_TOL: f64 = 1e-8;

/// Consecutive non-improving steps after which a descent is declared divergent.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticOuterLoss {
    k_out: Matrix,
    omega: Vector,
}

impl QuadraticOuterLoss {
    /// `k_out` is `d_ω × d_z`, `omega` has length `d_ω`.
    pub fn new(k_out: Matrix, omega: Vector) -> Result<Self> {
        linops::ensure_len(&omega, k_out.nrows(), "omega")?;
        linops::ensure_finite(&k_out, "K_out")?;
        linops::ensure_finite_vec(&omega, "omega")?;
        Ok(Self { k_out, omega })
    }

    pub fn k_out(&self) -> &Matrix {
        &self.k_out
    }
    pub fn omega(&self) -> &Vector {
        &self.omega
    }
    pub fn d_z(&self) -> usize {
        self.k_out.ncols()
    }
    pub fn d_omega(&self) -> usize {
        self.k_out.nrows()
    }

    pub fn loss(&self, z: &Vector) -> Result<f64> {
        linops::ensure_len(z, self.d_z(), "z")?;
        Ok(0.5 * (&self.k_out * z - &self.omega).norm_squared())
    }

    /// `∇ℓ(z) = K_outᵀ(K_out z − ω)`.
    pub fn gradient(&self, z: &Vector) -> Result<Vector> {
        linops::ensure_len(z, self.d_z(), "z")?;
        Ok(self.k_out.transpose() * (&self.k_out * z - &self.omega))
    }

    pub fn is_strongly_convex(&self) -> bool {
        linops::rank(&self.k_out).is_ok_and(|r| r == self.d_z())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainingMethod {
    ClosedForm,
    UnrolledGd,
    IftGd,
}

impl TrainingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMethod::ClosedForm => "closed_form",
            TrainingMethod::UnrolledGd => "unrolled_gd",
            TrainingMethod::IftGd => "ift_gd",
        }
    }
}

impl core::str::FromStr for TrainingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(TrainingMethod::ClosedForm),
            "unrolled_gd" => Ok(TrainingMethod::UnrolledGd),
            "ift_gd" => Ok(TrainingMethod::IftGd),
            other => Err(Error::InvalidParameter(format!(
                "unknown training method `{other}`"
            ))),
        }
    }
}

/// An outer solution `θ*,N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedOuter {
    pub theta: Vector,
    pub method: TrainingMethod,
    pub n_train: usize,
    /// Characterization residual for the closed form, final gradient norm
    /// for the descents.
    pub residual: f64,
    pub steps_taken: usize,
}

/// Stopping rule and step size of the outer descents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub max_steps: usize,
    /// `None` selects the method's default step.
    pub step_size: Option<f64>,
    pub tol: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_steps: 100_000,
            step_size: None,
            tol: 1e-10,
        }
    }
}

/// Least-squares data of the training objective at a fixed `N`.
#[derive(Debug, Clone)]
pub struct OuterDesign {
    pub procedure: LinearProcedure,
    /// `K_out A_N`.
    pub jacobian: Matrix,
    /// `v_N = K_out r_N − ω`.
    pub offset: Vector,
}

/// An inner problem, its solver settings and an outer loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Bilevel {
    inner: AffineInnerProblem,
    outer: QuadraticOuterLoss,
    eta: f64,
    z0: Vector,
}

impl Bilevel {
    pub fn new(
        inner: AffineInnerProblem,
        outer: QuadraticOuterLoss,
        eta: f64,
        z0: Vector,
    ) -> Result<Self> {
        inner.ensure_valid()?;
        if outer.d_z() != inner.d_z() {
            return Err(Error::DimensionMismatch {
                context: "K_out columns",
                expected: inner.d_z(),
                found: outer.d_z(),
            });
        }
        linops::ensure_len(&z0, inner.d_z(), "z0")?;
        linops::ensure_finite_vec(&z0, "z0")?;
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {eta}"
            )));
        }
        Ok(Self {
            inner,
            outer,
            eta,
            z0,
        })
    }

    /// Uses [`AffineInnerProblem::default_step_size`].
    pub fn with_default_step(
        inner: AffineInnerProblem,
        outer: QuadraticOuterLoss,
        z0: Vector,
    ) -> Result<Self> {
        let eta = inner.default_step_size()?;
        Self::new(inner, outer, eta, z0)
    }

    pub fn inner(&self) -> &AffineInnerProblem {
        &self.inner
    }
    pub fn outer(&self) -> &QuadraticOuterLoss {
        &self.outer
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn z0(&self) -> &Vector {
        &self.z0
    }

    /// Same instance with a different `U`.
    pub fn with_u(&self, u: Matrix) -> Result<Self> {
        Ok(Self {
            inner: self.inner.with_u(u)?,
            outer: self.outer.clone(),
            eta: self.eta,
            z0: self.z0.clone(),
        })
    }

    pub fn procedure(&self, horizon: Horizon) -> Result<LinearProcedure> {
        self.inner.closed_form_state(self.eta, &self.z0, horizon)
    }

    /// `ℓ(z_N(θ))` through the closed-form state at `horizon`.
    pub fn loss_at(&self, theta: &Vector, horizon: Horizon) -> Result<f64> {
        let z = self.procedure(horizon)?.apply(theta)?;
        self.outer.loss(&z)
    }

    pub fn design(&self, n: usize) -> Result<OuterDesign> {
        let procedure = self.procedure(Horizon::Steps(n))?;
        let jacobian = self.outer.k_out() * procedure.a_n();
        let offset = self.outer.k_out() * procedure.r_n() - self.outer.omega();
        Ok(OuterDesign {
            procedure,
            jacobian,
            offset,
        })
    }

    /// `‖K_out A_N θ + P(K_out A_N) v_N‖ / (1 + ‖v_N‖)`: zero exactly at the
    /// minimizers of `θ ↦ ℓ(z_N(θ))`.
    pub fn characterization_residual(&self, theta: &Vector, n: usize) -> Result<f64> {
        let d = self.design(n)?;
        linops::ensure_len(theta, self.inner.d_theta(), "theta")?;
        let projected = linops::proj_range(&d.jacobian)? * &d.offset;
        Ok((&d.jacobian * theta + projected).norm() / (1.0 + d.offset.norm()))
    }

    /// Minimum-norm minimizer `θ = −(K_out A_N)† v_N`.
    pub fn train_closed_form(&self, n: usize) -> Result<TrainedOuter> {
        let d = self.design(n)?;
        let theta = -(linops::pinv(&d.jacobian)? * &d.offset);
        let projected = linops::proj_range(&d.jacobian)? * &d.offset;
        let residual = (&d.jacobian * &theta + projected).norm() / (1.0 + d.offset.norm());
        if residual > CHARACTERIZATION_TOL {
            return Err(Error::InvariantViolation(format!(
                "closed-form solution misses the characterization by {residual:e}"
            )));
        }
        Ok(TrainedOuter {
            theta,
            method: TrainingMethod::ClosedForm,
            n_train: n,
            residual,
            steps_taken: 0,
        })
    }

    /// Exact gradient of `θ ↦ ℓ(z_N(θ))`:
    /// `(K_out A_N)ᵀ (K_out A_N θ + v_N)`.
    pub fn unrolled_gradient(&self, theta: &Vector, n: usize) -> Result<Vector> {
        let d = self.design(n)?;
        linops::ensure_len(theta, self.inner.d_theta(), "theta")?;
        Ok(d.jacobian.transpose() * (&d.jacobian * theta + &d.offset))
    }

    /// Gradient descent on `θ ↦ ℓ(z_N(θ))`. The default step is `1/L` with
    /// `L = ‖K_out A_N‖₂²`.
    pub fn train_unrolled_gd(
        &self,
        n: usize,
        opts: &DescentOptions,
        theta0: &Vector,
    ) -> Result<TrainedOuter> {
        linops::ensure_len(theta0, self.inner.d_theta(), "theta0")?;
        let d = self.design(n)?;
        let sigma_max = linops::operator_norm(&d.jacobian)?;
        let lipschitz = sigma_max * sigma_max;
        let step = opts.step_size.unwrap_or(if lipschitz > 0.0 {
            1.0 / lipschitz
        } else {
            1.0
        });
        let gram = d.jacobian.transpose() * &d.jacobian;
        let shift = d.jacobian.transpose() * &d.offset;
        let objective = |theta: &Vector| 0.5 * (&d.jacobian * theta + &d.offset).norm_squared();

        let mut theta = theta0.clone();
        let mut last_loss = objective(&theta);
        let mut rising = 0;
        for step_idx in 0..=opts.max_steps {
            let grad = &gram * &theta + &shift;
            let g_norm = grad.norm();
            if !g_norm.is_finite() {
                return Err(Error::Diverged {
                    method: "unrolled",
                    step: step_idx,
                    residual: g_norm,
                });
            }
            if g_norm <= opts.tol {
                return Ok(TrainedOuter {
                    theta,
                    method: TrainingMethod::UnrolledGd,
                    n_train: n,
                    residual: g_norm,
                    steps_taken: step_idx,
                });
            }
            if step_idx == opts.max_steps {
                return Err(Error::NotConverged {
                    method: "unrolled",
                    steps: step_idx,
                    residual: g_norm,
                });
            }
            theta -= grad * step;
            let loss = objective(&theta);
            rising = if loss > last_loss { rising + 1 } else { 0 };
            if rising >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged {
                    method: "unrolled",
                    step: step_idx + 1,
                    residual: g_norm,
                });
            }
            last_loss = loss;
        }
        unreachable!("loop returns at max_steps")
    }

    /// `M = (∂_z f)† ∂_θ f = (K_inᵀ B)† K_inᵀ U`.
    fn ift_jacobian(&self) -> Result<Matrix> {
        let k_t = self.inner.k_in().transpose();
        let dz_f = &k_t * self.inner.b();
        let dtheta_f = &k_t * self.inner.u();
        Ok(linops::pinv(&dz_f)? * dtheta_f)
    }

    /// `p_N(θ) = −((∂_z f)† ∂_θ f)ᵀ ∇ℓ(z_N(θ))`.
    pub fn ift_gradient(&self, theta: &Vector, n: usize) -> Result<Vector> {
        let z = self.procedure(Horizon::Steps(n))?.apply(theta)?;
        let grad = self.outer.gradient(&z)?;
        Ok(-(self.ift_jacobian()?.transpose() * grad))
    }

    /// `(X_N, b_N)` with `p_N(θ) = X_N θ − b_N`:
    /// `X_N = −Mᵀ G A_N`, `b_N = Mᵀ (G r_N − K_outᵀ ω)`, `G = K_outᵀ K_out`.
    pub fn ift_system(&self, n: usize) -> Result<(Matrix, Vector)> {
        let proc = self.procedure(Horizon::Steps(n))?;
        let m_t = self.ift_jacobian()?.transpose();
        let k_out = self.outer.k_out();
        let g = k_out.transpose() * k_out;
        let x_n = -(&m_t * &g * proc.a_n());
        let b_n = &m_t * (&g * proc.r_n() - k_out.transpose() * self.outer.omega());
        Ok((x_n, b_n))
    }

    /// `α_N = 1/(ρ(X_N) + ε)` with `ε = 0.1 ρ(X_N)`, or `1` when `X_N` is nilpotent.
    pub fn ift_step_size(&self, n: usize) -> Result<f64> {
        let (x_n, _) = self.ift_system(n)?;
        Ok(step_from_radius(linops::spectrum(&x_n)?.spectral_radius))
    }

    /// Iterates `θ ← θ − α_N p_N(θ)` until `‖p_N(θ)‖ ≤ tol`.
    pub fn train_ift(
        &self,
        n: usize,
        opts: &DescentOptions,
        theta0: &Vector,
    ) -> Result<TrainedOuter> {
        linops::ensure_len(theta0, self.inner.d_theta(), "theta0")?;
        let (x_n, b_n) = self.ift_system(n)?;
        let alpha = match opts.step_size {
            Some(a) => a,
            None => step_from_radius(linops::spectrum(&x_n)?.spectral_radius),
        };
        let mut theta = theta0.clone();
        let mut last = f64::INFINITY;
        let mut rising = 0;
        for step_idx in 0..=opts.max_steps {
            let p = &x_n * &theta - &b_n;
            let p_norm = p.norm();
            if !p_norm.is_finite() {
                return Err(Error::Diverged {
                    method: "ift",
                    step: step_idx,
                    residual: p_norm,
                });
            }
            if p_norm <= opts.tol {
                return Ok(TrainedOuter {
                    theta,
                    method: TrainingMethod::IftGd,
                    n_train: n,
                    residual: p_norm,
                    steps_taken: step_idx,
                });
            }
            if step_idx == opts.max_steps {
                return Err(Error::NotConverged {
                    method: "ift",
                    steps: step_idx,
                    residual: p_norm,
                });
            }
            rising = if p_norm > last { rising + 1 } else { 0 };
            if rising >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged {
                    method: "ift",
                    step: step_idx,
                    residual: p_norm,
                });
            }
            last = p_norm;
            theta -= p * alpha;
        }
        unreachable!("loop returns at max_steps")
    }

    /// Human-readable one-line summary of dimensions.
    pub fn describe(&self) -> String {
        format!(
            "d_x={} d_z={} d_theta={} d_omega={} eta={}",
            self.inner.d_x(),
            self.inner.d_z(),
            self.inner.d_theta(),
            self.outer.d_omega(),
            self.eta
        )
    }
}

fn step_from_radius(rho: f64) -> f64 {
    if rho > 0.0 {
        1.0 / (1.1 * rho)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    fn m1(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }

    /// k_in = b = 1, given u and c, z0 = 0, η = 0.5, K_out = 1, ω = 1.
    fn scalar_chain(u: f64, c: f64) -> Bilevel {
        let inner = AffineInnerProblem::new(m1(1.0), m1(1.0), m1(u), v1(c)).unwrap();
        let outer = QuadraticOuterLoss::new(m1(1.0), v1(1.0)).unwrap();
        Bilevel::new(inner, outer, 0.5, v1(0.0)).unwrap()
    }

    #[test]
    fn loss_examples() {
        let l = QuadraticOuterLoss::new(
            Matrix::identity(2, 2),
            Vector::from_vec(alloc::vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(
            l.loss(&Vector::from_vec(alloc::vec![1.0, 2.0])).unwrap(),
            0.0
        );
        let l = QuadraticOuterLoss::new(m1(1.0), v1(1.0)).unwrap();
        assert_eq!(l.loss(&v1(-0.75)).unwrap(), 1.53125);
        let l = QuadraticOuterLoss::new(Matrix::identity(2, 2), Vector::zeros(2)).unwrap();
        let z = Vector::from_vec(alloc::vec![0.3, -1.2]);
        assert!((l.loss(&(&z * 3.0)).unwrap() - 9.0 * l.loss(&z).unwrap()).abs() < 1e-14);
        assert!(l.loss(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn loss_at_scalar_chain() {
        let b = scalar_chain(0.0, 1.0);
        let theta = v1(0.0);
        assert_eq!(b.loss_at(&theta, Horizon::Steps(2)).unwrap(), 1.53125);
        assert_eq!(b.loss_at(&theta, Horizon::Limit).unwrap(), 2.0);
        let far = b.loss_at(&theta, Horizon::Steps(200)).unwrap();
        assert!((far - 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_scalar() {
        // z_2(θ) = 0.75 θ, minimize ½(0.75θ − 1)²
        let b = scalar_chain(-1.0, 0.0);
        let t = b.train_closed_form(2).unwrap();
        assert!((t.theta[0] - 4.0 / 3.0).abs() < 1e-14);
        assert!(t.residual <= CHARACTERIZATION_TOL);
        let zero_u = scalar_chain(0.0, 1.0);
        assert_eq!(zero_u.train_closed_form(2).unwrap().theta[0], 0.0);
    }

    #[test]
    fn unrolled_scalar_and_warm_start() {
        let b = scalar_chain(-1.0, 0.0);
        let t = b
            .train_unrolled_gd(2, &DescentOptions::default(), &v1(0.0))
            .unwrap();
        assert!((t.theta[0] - 4.0 / 3.0).abs() < 1e-8);
        let cf = b.train_closed_form(2).unwrap();
        let warm = b
            .train_unrolled_gd(2, &DescentOptions::default(), &cf.theta)
            .unwrap();
        assert_eq!(warm.steps_taken, 0);
        assert!(warm.residual < 1e-12);
    }

    #[test]
    fn unrolled_reports_divergence() {
        let b = scalar_chain(-1.0, 0.0);
        let opts = DescentOptions {
            step_size: Some(10.0),
            ..DescentOptions::default()
        };
        assert!(matches!(
            b.train_unrolled_gd(2, &opts, &v1(0.0)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn ift_scalar() {
        let b = scalar_chain(-1.0, 0.0);
        // ∂_z f = 1, ∂_θ f = −1: p_N(θ) = z_N(θ) − ω.
        let p = b.ift_gradient(&v1(2.0), 2).unwrap();
        assert!((p[0] - (1.5 - 1.0)).abs() < 1e-15);
        // X_2 = 0.75 from the scalar product; α = 1/(1.1 · 0.75).
        let (x, _) = b.ift_system(2).unwrap();
        assert!((x[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((b.ift_step_size(2).unwrap() - 1.0 / (1.1 * 0.75)).abs() < 1e-15);

        let t = b
            .train_ift(2, &DescentOptions::default(), &v1(0.0))
            .unwrap();
        let cf = b.train_closed_form(2).unwrap();
        let z_ift = b
            .procedure(Horizon::Steps(2))
            .unwrap()
            .apply(&t.theta)
            .unwrap();
        let z_cf = b
            .procedure(Horizon::Steps(2))
            .unwrap()
            .apply(&cf.theta)
            .unwrap();
        assert!((z_ift - z_cf).norm() < 1e-7);
        let still = b
            .train_ift(2, &DescentOptions::default(), &t.theta)
            .unwrap();
        assert_eq!(still.steps_taken, 0);
    }

    #[test]
    fn ift_zero_u() {
        let b = scalar_chain(0.0, 1.0);
        assert_eq!(b.ift_gradient(&v1(3.0), 5).unwrap()[0], 0.0);
        assert_eq!(b.ift_step_size(5).unwrap(), 1.0);
        let t = b
            .train_ift(5, &DescentOptions::default(), &v1(3.0))
            .unwrap();
        assert_eq!(t.theta[0], 3.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            TrainingMethod::ClosedForm,
            TrainingMethod::UnrolledGd,
            TrainingMethod::IftGd,
        ] {
            assert_eq!(m.as_str().parse::<TrainingMethod>().unwrap(), m);
        }
        assert!("newton".parse::<TrainingMethod>().is_err());
    }
}

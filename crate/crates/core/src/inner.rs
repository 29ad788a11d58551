//! Affine inner problems `f(z, θ) = K_inᵀ(Bz + Uθ + c)` and the fixed-point
//! iteration `z_{N+1} = z_N − η f(z_N, θ)`.
//!
//! For such problems the `N`-th iterate is an affine function of `θ`,
//!
//! ```text
//! z_N(θ) = K_inᵀ E_N U θ + r_N
//! E_N    = ((I − η B K_inᵀ)^N − I) (B K_inᵀ)^{-1}
//! r_N    = K_inᵀ E_N (c + B z_0) + z_0
//! ```
//!
//! which [`AffineInnerProblem::closed_form_state`] builds as a
//! [`LinearProcedure`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linops::{self, Matrix, SpectrumReport, Vector};
use crate::{Error, Result};

/// Eigenvalues of `B K_inᵀ` must have real part strictly above this.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Default iteration cap for [`AffineInnerProblem::invertibility_threshold`].
pub const DEFAULT_N_MAX: usize = 1_000_000;

/// `‖(I − η B K_inᵀ)^N‖₂` must drop below this for `N` to count as past the
/// invertibility threshold.
pub const THRESHOLD_NORM: f64 = 0.5;

/// Number of inner iterations, possibly the limit `N → ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    Steps(usize),
    Limit,
}

impl From<usize> for Horizon {
    fn from(n: usize) -> Self {
        Horizon::Steps(n)
    }
}

/// The quadruple `(K_in, B, U, c)`.
///
/// Shapes are `K_in, B: d_x × d_z`, `U: d_x × d_θ`, `c: d_x`. Construction
/// checks shapes and finiteness only; [`AffineInnerProblem::validate`]
/// checks surjectivity and the spectrum condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineInnerProblem {
    k_in: Matrix,
    b: Matrix,
    u: Matrix,
    c: Vector,
}

/// Outcome of [`AffineInnerProblem::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub k_in_rank: usize,
    pub d_x: usize,
    pub d_z: usize,
    /// Spectrum of `B K_inᵀ`; `None` when it could not be computed.
    pub spectrum: Option<SpectrumReport>,
    pub surjective: bool,
    pub positive_spectrum: bool,
    pub issues: Vec<String>,
}

impl Validation {
    pub fn passed(&self) -> bool {
        self.surjective && self.positive_spectrum
    }
}

/// Step size, initial point and iteration count of the fixed-point solver.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointConfig {
    pub eta: f64,
    pub z0: Vector,
    pub n: usize,
}

impl FixedPointConfig {
    pub fn new(eta: f64, z0: Vector, n: usize) -> Result<Self> {
        check_eta(eta)?;
        linops::ensure_finite_vec(&z0, "z0")?;
        Ok(Self { eta, z0, n })
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() && eta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "step size must be positive, got {eta}"
        )))
    }
}

impl AffineInnerProblem {
    pub fn new(k_in: Matrix, b: Matrix, u: Matrix, c: Vector) -> Result<Self> {
        let (d_x, d_z) = k_in.shape();
        if d_x == 0 || d_z == 0 || u.ncols() == 0 {
            return Err(Error::InvalidParameter("empty dimension".into()));
        }
        if b.shape() != (d_x, d_z) {
            return Err(Error::DimensionMismatch {
                context: "B (rows x cols must match K_in)",
                expected: d_x * d_z,
                found: b.nrows() * b.ncols(),
            });
        }
        if u.nrows() != d_x {
            return Err(Error::DimensionMismatch {
                context: "U rows",
                expected: d_x,
                found: u.nrows(),
            });
        }
        linops::ensure_len(&c, d_x, "c")?;
        linops::ensure_finite(&k_in, "K_in")?;
        linops::ensure_finite(&b, "B")?;
        linops::ensure_finite(&u, "U")?;
        linops::ensure_finite_vec(&c, "c")?;
        Ok(Self { k_in, b, u, c })
    }

    pub fn k_in(&self) -> &Matrix {
        &self.k_in
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn u(&self) -> &Matrix {
        &self.u
    }
    pub fn c(&self) -> &Vector {
        &self.c
    }
    pub fn d_x(&self) -> usize {
        self.k_in.nrows()
    }
    pub fn d_z(&self) -> usize {
        self.k_in.ncols()
    }
    pub fn d_theta(&self) -> usize {
        self.u.ncols()
    }

    /// Same problem with a different outer map `U`.
    pub fn with_u(&self, u: Matrix) -> Result<Self> {
        Self::new(self.k_in.clone(), self.b.clone(), u, self.c.clone())
    }

    /// `H̄ = B K_inᵀ`, the `d_x × d_x` matrix driving the iteration.
    pub fn h_bar(&self) -> Matrix {
        &self.b * self.k_in.transpose()
    }

    /// `f(z, θ)`.
    pub fn residual(&self, z: &Vector, theta: &Vector) -> Result<Vector> {
        linops::ensure_len(z, self.d_z(), "z")?;
        linops::ensure_len(theta, self.d_theta(), "theta")?;
        Ok(self.k_in.transpose() * (&self.b * z + &self.u * theta + &self.c))
    }

    pub fn validate(&self) -> Validation {
        let (d_x, d_z) = self.k_in.shape();
        let mut issues = Vec::new();
        let k_in_rank = linops::rank(&self.k_in).unwrap_or(0);
        let surjective = d_x <= d_z && k_in_rank == d_x;
        if d_x > d_z {
            issues.push(format!(
                "k_in cannot be surjective: d_x = {d_x} exceeds d_z = {d_z}"
            ));
        } else if !surjective {
            issues.push(format!(
                "k_in is not surjective: rank {k_in_rank} < d_x = {d_x}"
            ));
        }
        let spectrum = linops::spectrum(&self.h_bar()).ok();
        let positive_spectrum = match &spectrum {
            Some(s) => s.min_real_part > SPECTRAL_TOL,
            None => false,
        };
        match &spectrum {
            Some(s) if !positive_spectrum => issues.push(format!(
                "B K_in^T has an eigenvalue with nonpositive real part ({:e})",
                s.min_real_part
            )),
            None => issues.push("spectrum of B K_in^T could not be computed".into()),
            _ => {}
        }
        Validation {
            k_in_rank,
            d_x,
            d_z,
            spectrum,
            surjective,
            positive_spectrum,
            issues,
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.passed() {
            Ok(())
        } else {
            Err(Error::InvalidProblem(v.issues.join("; ")))
        }
    }

    /// `η = 0.9 · min_λ 2 Re(λ) / |λ|²` over the eigenvalues of `B K_inᵀ`,
    /// which puts every eigenvalue of `I − η B K_inᵀ` strictly inside the
    /// unit disc.
    pub fn default_step_size(&self) -> Result<f64> {
        let v = self.validate();
        if !v.passed() {
            return Err(Error::InvalidProblem(v.issues.join("; ")));
        }
        let spectrum = v.spectrum.expect("validated spectrum");
        let eta = spectrum
            .eigenvalues
            .iter()
            .map(|l| 2.0 * l.re / l.norm_sqr())
            .fold(f64::INFINITY, f64::min);
        Ok(0.9 * eta)
    }

    /// Runs the literal recursion `z ← z − η f(z, θ)` for `cfg.n` steps.
    pub fn iterate(&self, theta: &Vector, cfg: &FixedPointConfig) -> Result<Vector> {
        linops::ensure_len(theta, self.d_theta(), "theta")?;
        linops::ensure_len(&cfg.z0, self.d_z(), "z0")?;
        let k_t = self.k_in.transpose();
        let shift = &self.u * theta + &self.c;
        let mut z = cfg.z0.clone();
        for _ in 0..cfg.n {
            let f = &k_t * (&self.b * &z + &shift);
            z -= f * cfg.eta;
        }
        Ok(z)
    }

    /// `E_N` and `r_N` of the fixed-point iteration.
    pub fn closed_form_state(
        &self,
        eta: f64,
        z0: &Vector,
        horizon: Horizon,
    ) -> Result<LinearProcedure> {
        check_eta(eta)?;
        linops::ensure_len(z0, self.d_z(), "z0")?;
        linops::ensure_finite_vec(z0, "z0")?;
        let d_x = self.d_x();
        let h_bar = self.h_bar();
        let h_bar_inv = linops::inverse(&h_bar, "B K_in^T")?;
        let e_n = match horizon {
            Horizon::Steps(0) => Matrix::zeros(d_x, d_x),
            Horizon::Steps(n) => {
                let contraction = Matrix::identity(d_x, d_x) - &h_bar * eta;
                let power = linops::mat_pow(&contraction, n)?;
                (power - Matrix::identity(d_x, d_x)) * h_bar_inv
            }
            Horizon::Limit => -h_bar_inv,
        };
        let r_n = self.k_in.transpose() * (&e_n * (&self.c + &self.b * z0)) + z0;
        Ok(LinearProcedure {
            problem: self.clone(),
            e_n,
            r_n,
            n: horizon,
            n0: None,
            eta: Some(eta),
        })
    }

    /// Smallest `N ≤ n_max` with `‖(I − η B K_inᵀ)^N‖₂ < 0.5`; past it
    /// `(I − η B K_inᵀ)^N − I` and therefore `E_N` are invertible.
    pub fn invertibility_threshold(&self, eta: f64, n_max: usize) -> Result<usize> {
        check_eta(eta)?;
        let d_x = self.d_x();
        let contraction = Matrix::identity(d_x, d_x) - self.h_bar() * eta;
        let sqrt_d = libm::sqrt(d_x as f64);
        let mut power = Matrix::identity(d_x, d_x);
        for n in 1..=n_max {
            power = &power * &contraction;
            if !power.iter().all(|x| x.is_finite()) {
                break;
            }
            // ‖P‖_F / √d ≤ ‖P‖₂ ≤ ‖P‖_F brackets the operator norm.
            let frob = power.norm();
            if frob < THRESHOLD_NORM {
                return Ok(n);
            }
            if frob / sqrt_d >= THRESHOLD_NORM {
                continue;
            }
            if linops::operator_norm(&power)? < THRESHOLD_NORM {
                return Ok(n);
            }
        }
        Err(Error::ThresholdNotReached(n_max))
    }
}

/// `z_N(θ) = K_inᵀ E_N U θ + r_N` for a fixed `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProcedure {
    problem: AffineInnerProblem,
    e_n: Matrix,
    r_n: Vector,
    n: Horizon,
    n0: Option<usize>,
    eta: Option<f64>,
}

impl LinearProcedure {
    /// Assembles a procedure from externally computed `E_N` and `r_N`.
    pub fn from_parts(
        problem: AffineInnerProblem,
        e_n: Matrix,
        r_n: Vector,
        n: Horizon,
        eta: Option<f64>,
    ) -> Result<Self> {
        let d_x = problem.d_x();
        if e_n.shape() != (d_x, d_x) {
            return Err(Error::DimensionMismatch {
                context: "E_N",
                expected: d_x,
                found: e_n.nrows(),
            });
        }
        linops::ensure_len(&r_n, problem.d_z(), "r_N")?;
        Ok(Self {
            problem,
            e_n,
            r_n,
            n,
            n0: None,
            eta,
        })
    }

    /// Records the invertibility threshold of the generating problem.
    pub fn with_threshold(mut self, n_max: usize) -> Result<Self> {
        let eta = self
            .eta
            .ok_or_else(|| Error::InvalidParameter("procedure has no step size".into()))?;
        self.n0 = Some(self.problem.invertibility_threshold(eta, n_max)?);
        Ok(self)
    }

    pub fn problem(&self) -> &AffineInnerProblem {
        &self.problem
    }
    pub fn e_n(&self) -> &Matrix {
        &self.e_n
    }
    pub fn r_n(&self) -> &Vector {
        &self.r_n
    }
    pub fn n(&self) -> Horizon {
        self.n
    }
    pub fn n0(&self) -> Option<usize> {
        self.n0
    }
    pub fn eta(&self) -> Option<f64> {
        self.eta
    }

    /// `A_N = K_inᵀ E_N U`, the linear part of `θ ↦ z_N(θ)`.
    pub fn a_n(&self) -> Matrix {
        self.problem.k_in.transpose() * &self.e_n * &self.problem.u
    }

    pub fn apply(&self, theta: &Vector) -> Result<Vector> {
        linops::ensure_len(theta, self.problem.d_theta(), "theta")?;
        Ok(self.problem.k_in.transpose() * (&self.e_n * (&self.problem.u * theta)) + &self.r_n)
    }

    /// Whether `E_N` is invertible under the shared rank rule.
    pub fn e_n_invertible(&self) -> Result<bool> {
        Ok(linops::rank(&self.e_n)? == self.e_n.nrows())
    }
}

//! Linear implicit meta-learning as an affine bilevel problem.
//!
//! Task `i` adapts its own weights `zᵢ` by minimizing
//! `½‖Xᵢ zᵢ − yᵢ‖² + λ‖zᵢ − θ‖²` with gradient
//! `(XᵢᵀXᵢ + λI) zᵢ − λθ − Xᵢᵀyᵢ`. Stacking `z = [z₁; …; z_T]` gives an affine
//! inner problem with `K_in = I`, and the validation losses of all tasks
//! form one quadratic outer loss over the stacked `z`.

use alloc::format;
use alloc::vec::Vec;

use crate::inner::AffineInnerProblem;
use crate::linops::{self, Matrix, Vector};
use crate::outer::{Bilevel, QuadraticOuterLoss};
use crate::theory::{self, DeltaN, I2OReport, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTask {
    x_train: Matrix,
    y_train: Vector,
    x_val: Matrix,
    y_val: Vector,
}

impl LinearTask {
    pub fn new(x_train: Matrix, y_train: Vector, x_val: Matrix, y_val: Vector) -> Result<Self> {
        linops::ensure_finite(&x_train, "x_train")?;
        linops::ensure_finite(&x_val, "x_val")?;
        linops::ensure_finite_vec(&y_train, "y_train")?;
        linops::ensure_finite_vec(&y_val, "y_val")?;
        linops::ensure_len(&y_train, x_train.nrows(), "y_train")?;
        linops::ensure_len(&y_val, x_val.nrows(), "y_val")?;
        if x_val.ncols() != x_train.ncols() {
            return Err(Error::DimensionMismatch {
                context: "x_val columns",
                expected: x_train.ncols(),
                found: x_val.ncols(),
            });
        }
        Ok(Self {
            x_train,
            y_train,
            x_val,
            y_val,
        })
    }

    pub fn x_train(&self) -> &Matrix {
        &self.x_train
    }
    pub fn y_train(&self) -> &Vector {
        &self.y_train
    }
    pub fn x_val(&self) -> &Matrix {
        &self.x_val
    }
    pub fn y_val(&self) -> &Vector {
        &self.y_val
    }
    pub fn dim(&self) -> usize {
        self.x_train.ncols()
    }

    /// `(XᵀX + λI)⁻¹(λθ + Xᵀy)`, the exact adapted weights.
    pub fn adapted(&self, lambda: f64, theta: &Vector) -> Result<Vector> {
        let d = self.dim();
        let h = self.x_train.transpose() * &self.x_train + Matrix::identity(d, d) * lambda;
        let rhs = theta * lambda + self.x_train.transpose() * &self.y_train;
        Ok(linops::inverse(&h, "task Hessian")? * rhs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    lambda: f64,
    tasks: Vec<LinearTask>,
}

impl MetaConfig {
    pub fn new(lambda: f64, tasks: Vec<LinearTask>) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let first = tasks
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty task list".into()))?;
        let d = first.dim();
        if let Some(t) = tasks.iter().find(|t| t.dim() != d) {
            return Err(Error::DimensionMismatch {
                context: "task dimension",
                expected: d,
                found: t.dim(),
            });
        }
        Ok(Self { lambda, tasks })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn tasks(&self) -> &[LinearTask] {
        &self.tasks
    }
    pub fn dim(&self) -> usize {
        self.tasks[0].dim()
    }
}

/// Stacked inner problem: `K_in = I`, `B = diag(XᵢᵀXᵢ + λI)`,
/// `U = [−λI; …; −λI]`, `c = [−X₁ᵀy₁; …]`.
pub fn build_inner(cfg: &MetaConfig) -> Result<AffineInnerProblem> {
    let d = cfg.dim();
    let t = cfg.tasks.len();
    let eye = Matrix::identity(d, d);
    let blocks: Vec<Matrix> = cfg
        .tasks
        .iter()
        .map(|task| task.x_train.transpose() * &task.x_train + &eye * cfg.lambda)
        .collect();
    let b = linops::block_diag(&blocks);
    let mut u = Matrix::zeros(t * d, d);
    let mut c = Vector::zeros(t * d);
    for (i, task) in cfg.tasks.iter().enumerate() {
        u.view_mut((i * d, 0), (d, d))
            .copy_from(&(&eye * -cfg.lambda));
        c.rows_mut(i * d, d)
            .copy_from(&-(task.x_train.transpose() * &task.y_train));
    }
    let p = AffineInnerProblem::new(Matrix::identity(t * d, t * d), b, u, c)?;
    p.ensure_valid()?;
    Ok(p)
}

/// `K_out = diag(X_iᵛᵃˡ)`, `ω = [y₁ᵛᵃˡ; …]`.
pub fn build_outer(cfg: &MetaConfig) -> Result<QuadraticOuterLoss> {
    let blocks: Vec<Matrix> = cfg.tasks.iter().map(|t| t.x_val.clone()).collect();
    let omega_len: usize = cfg.tasks.iter().map(|t| t.y_val.len()).sum();
    let mut omega = Vector::zeros(omega_len);
    let mut at = 0;
    for t in &cfg.tasks {
        omega.rows_mut(at, t.y_val.len()).copy_from(&t.y_val);
        at += t.y_val.len();
    }
    QuadraticOuterLoss::new(linops::block_diag(&blocks), omega)
}

/// Bilevel problem with inner start `z0 = 0` and step `eta`, or the default
/// step on the stacked `B` when `None`.
pub fn build(cfg: &MetaConfig, eta: Option<f64>) -> Result<Bilevel> {
    let inner = build_inner(cfg)?;
    let outer = build_outer(cfg)?;
    let z0 = Vector::zeros(inner.d_z());
    match eta {
        Some(eta) => Bilevel::new(inner, outer, eta, z0),
        None => Bilevel::with_default_step(inner, outer, z0),
    }
}

/// Closed-form training at `n` followed by a gap sweep.
pub fn meta_sweep(
    cfg: &MetaConfig,
    eta: Option<f64>,
    n: usize,
    delta_grid: &[DeltaN],
) -> Result<I2OReport> {
    let b = build(cfg, eta)?;
    theory::sweep(&b, n, delta_grid, Trainer::ClosedForm, 0)
}

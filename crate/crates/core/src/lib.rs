//! Affine theory of implicit models.
//!
//! An implicit model outputs `z_N(θ)`, the `N`-th iterate of a fixed-point
//! procedure solving `f(z, θ) = 0`, and is trained by minimizing an outer
//! loss `ℓ(z_N(θ))`. For affine `f` and quadratic `ℓ` every quantity of
//! interest has a closed form, which this crate computes:
//!
//! - [`linops`]: dense pseudo-inverses, range projectors, spectra and a
//!   seeded Gaussian source.
//! - [`inner`]: affine inner problems, the fixed-point iteration and its
//!   closed form as a time-invertible linear procedure.
//! - [`respoly`]: residual polynomials of gradient methods on quadratics.
//! - [`outer`]: quadratic outer losses and the closed-form, unrolled and
//!   implicit-differentiation trainers.
//! - [`theory`]: the loss gap `D(N, ΔN)`, its lower bound and the
//!   Monte Carlo scans built on them.
//! - [`metalin`]: the stacked problem of linear implicit meta-learning.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

mod error;
pub mod inner;
pub mod linops;
pub mod metalin;
pub mod outer;
pub mod respoly;
pub mod theory;

pub use error::{Error, Result};
pub use inner::{AffineInnerProblem, FixedPointConfig, Horizon, LinearProcedure, Validation};
pub use linops::{Matrix, SeededSource, SpectrumReport, Vector};
pub use outer::{Bilevel, DescentOptions, QuadraticOuterLoss, TrainedOuter, TrainingMethod};
pub use respoly::{GradientMethod, ResidualPolynomial};
pub use theory::{AvgCaseReport, DeltaN, I2OReport, I2ORow, Trainer};

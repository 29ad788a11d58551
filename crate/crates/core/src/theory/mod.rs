//! The loss gap `D(N, ΔN) = ℓ(z_{N+ΔN}(θ*,N)) − ℓ(z_N(θ*,N))` and its
//! lower bound
//!
//! ```text
//! D(N, ΔN) ≥ −½ ‖(P(K_out K_inᵀ) − P(K_out K_inᵀ E_N U)) (K_out r_N − ω)‖²
//! ```
//!
//! where `P(X)` projects orthogonally onto `range(X)`. The bound does not
//! depend on `ΔN`: it caps how much loss can be recovered by running more or
//! fewer inner iterations than were used for training.

pub mod generate;
mod montecarlo;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::inner::Horizon;
use crate::linops::{self, Matrix, Vector};
use crate::outer::{Bilevel, DescentOptions, TrainedOuter, TrainingMethod};
use crate::{Error, Result};

pub use montecarlo::{
    avg_case_seed, monte_carlo_avg_case, non_strongly_convex_scan, nonconvex_seed, AvgCaseConfig,
    AvgCaseReport, AvgCell, NonConvexConfig, SeedBounds, SeedCell, MC_ABS_FLOOR,
};

/// Rows must satisfy `d_gap ≥ lower_bound − BOUND_TOL · (1 + |lower_bound|)`.
pub const BOUND_TOL: f64 = 1e-7;

/// Change `ΔN` in the number of inner iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeltaN {
    Steps(i64),
    /// Evaluate at the exact fixed point.
    Infinite,
}

impl DeltaN {
    /// Horizon `N + ΔN`; requires `ΔN > −N`.
    pub fn target(self, n: usize) -> Result<Horizon> {
        match self {
            DeltaN::Infinite => Ok(Horizon::Limit),
            DeltaN::Steps(d) => {
                let total = n as i64 + d;
                if total <= 0 {
                    Err(Error::InvalidParameter(format!(
                        "delta_n = {d} must exceed -n = -{n}"
                    )))
                } else {
                    Ok(Horizon::Steps(total as usize))
                }
            }
        }
    }
}

impl fmt::Display for DeltaN {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaN::Steps(d) => write!(f, "{d}"),
            DeltaN::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for DeltaN {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" => Ok(DeltaN::Infinite),
            t => t
                .parse::<i64>()
                .map(DeltaN::Steps)
                .map_err(|_| Error::InvalidParameter(format!("bad delta_n `{t}`"))),
        }
    }
}

/// `{−N+1, …, hi}`, every integer.
pub fn linear_grid(n: usize, hi: i64) -> Vec<DeltaN> {
    (1 - n as i64..=hi).map(DeltaN::Steps).collect()
}

/// Linear on `[−N+1, 0]`, doubling from 1 up to `hi`, then optionally `∞`.
pub fn mixed_grid(n: usize, hi: i64, infinite: bool) -> Vec<DeltaN> {
    let mut grid: Vec<DeltaN> = (1 - n as i64..=0).map(DeltaN::Steps).collect();
    let mut d = 1;
    while d <= hi {
        grid.push(DeltaN::Steps(d));
        d *= 2;
    }
    if grid.last() != Some(&DeltaN::Steps(hi)) && hi > 0 {
        grid.push(DeltaN::Steps(hi));
    }
    if infinite {
        grid.push(DeltaN::Infinite);
    }
    grid
}

/// Pieces of the bound at a fixed `N` that do not depend on `U`.
#[derive(Debug, Clone)]
pub(crate) struct BoundParts {
    /// `P(C)` with `C = K_out K_inᵀ`.
    pub proj_c: Matrix,
    /// `C E_N`.
    pub c_e_n: Matrix,
    /// `v_N = K_out r_N − ω`.
    pub v_n: Vector,
    pub r_n_sq: f64,
}

impl BoundParts {
    pub fn new(b: &Bilevel, n: usize) -> Result<Self> {
        let proc = b.procedure(Horizon::Steps(n))?;
        let k_out = b.outer().k_out();
        let c = k_out * b.inner().k_in().transpose();
        Ok(Self {
            proj_c: linops::proj_range(&c)?,
            c_e_n: &c * proc.e_n(),
            v_n: k_out * proc.r_n() - b.outer().omega(),
            r_n_sq: proc.r_n().norm_squared(),
        })
    }

    pub fn bound(&self, u: &Matrix) -> Result<f64> {
        let diff = &self.proj_c - linops::proj_range(&(&self.c_e_n * u))?;
        Ok(-0.5 * (diff * &self.v_n).norm_squared())
    }
}

/// `−½‖(P(K_out K_inᵀ) − P(K_out K_inᵀ E_N U))(K_out r_N − ω)‖²`.
pub fn lower_bound(b: &Bilevel, n: usize) -> Result<f64> {
    BoundParts::new(b, n)?.bound(b.inner().u())
}

/// Both terms of the closed-form training loss
/// `ℓ(z_N(θ*,N)) = ½‖(P(C) − P(C E_N U)) v_N‖² + ½‖P(C^⊥) v_N‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDecomposition {
    /// Part that a different `N` could recover; equals minus the bound.
    pub recoverable: f64,
    /// Part outside `range(K_out K_inᵀ)`, unreachable for every `N`.
    pub unreachable: f64,
}

impl LossDecomposition {
    pub fn total(&self) -> f64 {
        self.recoverable + self.unreachable
    }
}

pub fn loss_decomposition(b: &Bilevel, n: usize) -> Result<LossDecomposition> {
    let parts = BoundParts::new(b, n)?;
    let recoverable = -parts.bound(b.inner().u())?;
    let d = parts.proj_c.nrows();
    let complement = Matrix::identity(d, d) - &parts.proj_c;
    let unreachable = 0.5 * (complement * &parts.v_n).norm_squared();
    Ok(LossDecomposition {
        recoverable,
        unreachable,
    })
}

/// `D(N, ΔN)` at `theta`.
pub fn d_gap(b: &Bilevel, theta: &Vector, n: usize, delta: DeltaN) -> Result<f64> {
    let target = delta.target(n)?;
    if delta == DeltaN::Steps(0) {
        return Ok(0.0);
    }
    Ok(b.loss_at(theta, target)? - b.loss_at(theta, Horizon::Steps(n))?)
}

/// One line of an [`I2OReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct I2ORow {
    pub seed: u64,
    pub n: usize,
    pub delta_n: DeltaN,
    pub loss_n: f64,
    pub loss_n_dn: f64,
    pub d_gap: f64,
    pub lower_bound: f64,
}

impl I2ORow {
    pub fn satisfies_bound(&self) -> bool {
        self.d_gap >= self.lower_bound - BOUND_TOL * (1.0 + self.lower_bound.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub d_x: usize,
    pub d_z: usize,
    pub d_theta: usize,
    pub d_omega: usize,
    /// Shared inner step size; `None` when rows come from instances with
    /// different steps.
    pub eta: Option<f64>,
    pub method: TrainingMethod,
}

/// `(N, ΔN)` grid of losses, gaps and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct I2OReport {
    meta: ReportMeta,
    rows: Vec<I2ORow>,
}

impl I2OReport {
    /// Checks the bound and loss-sign invariants on every row.
    pub fn new(meta: ReportMeta, rows: Vec<I2ORow>) -> Result<Self> {
        let report = Self { meta, rows };
        if let Some(row) = report.violations().first() {
            return Err(Error::InvariantViolation(format!(
                "seed {} n {} delta_n {}: d_gap {:e} below lower bound {:e}",
                row.seed, row.n, row.delta_n, row.d_gap, row.lower_bound
            )));
        }
        if let Some(row) = report
            .rows
            .iter()
            .find(|r| !(r.loss_n >= 0.0 && r.loss_n_dn >= 0.0))
        {
            return Err(Error::InvariantViolation(format!(
                "seed {} n {}: negative or non-finite loss",
                row.seed, row.n
            )));
        }
        Ok(report)
    }

    /// Concatenates reports, keeping `eta` only when every part agrees.
    pub fn concat(reports: Vec<I2OReport>) -> Result<Self> {
        let mut iter = reports.into_iter();
        let mut first = iter
            .next()
            .ok_or_else(|| Error::InvalidParameter("no reports to concatenate".into()))?;
        for r in iter {
            if r.meta.eta != first.meta.eta {
                first.meta.eta = None;
            }
            first.rows.extend(r.rows);
        }
        Ok(first)
    }

    pub fn meta(&self) -> &ReportMeta {
        &self.meta
    }

    pub fn rows(&self) -> &[I2ORow] {
        &self.rows
    }

    pub fn violations(&self) -> Vec<&I2ORow> {
        self.rows.iter().filter(|r| !r.satisfies_bound()).collect()
    }

    /// Smallest `d_gap` per seed together with its row.
    pub fn min_gap_per_seed(&self) -> Vec<I2ORow> {
        let mut out: Vec<I2ORow> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|r| r.seed == row.seed) {
                Some(best) if row.d_gap < best.d_gap => *best = *row,
                Some(_) => {}
                None => out.push(*row),
            }
        }
        out
    }
}

/// Outer trainer used by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trainer {
    ClosedForm,
    /// Started from `θ = 0`.
    UnrolledGd(DescentOptions),
    /// Started from `θ = 0`.
    Ift(DescentOptions),
}

impl Trainer {
    pub fn method(&self) -> TrainingMethod {
        match self {
            Trainer::ClosedForm => TrainingMethod::ClosedForm,
            Trainer::UnrolledGd(_) => TrainingMethod::UnrolledGd,
            Trainer::Ift(_) => TrainingMethod::IftGd,
        }
    }

    pub fn train(&self, b: &Bilevel, n: usize) -> Result<TrainedOuter> {
        let theta0 = Vector::zeros(b.inner().d_theta());
        match self {
            Trainer::ClosedForm => b.train_closed_form(n),
            Trainer::UnrolledGd(opts) => b.train_unrolled_gd(n, opts, &theta0),
            Trainer::Ift(opts) => b.train_ift(n, opts, &theta0),
        }
    }
}

/// Trains at `n`, then evaluates every `ΔN` of the grid.
pub fn sweep(
    b: &Bilevel,
    n: usize,
    delta_grid: &[DeltaN],
    trainer: Trainer,
    seed: u64,
) -> Result<I2OReport> {
    if delta_grid.is_empty() {
        return Err(Error::InvalidParameter("empty delta_n grid".into()));
    }
    let trained = trainer.train(b, n)?;
    let bound = lower_bound(b, n)?;
    let loss_n = b.loss_at(&trained.theta, Horizon::Steps(n))?;
    let rows = delta_grid
        .iter()
        .map(|&delta| {
            let target = delta.target(n)?;
            let loss_n_dn = if delta == DeltaN::Steps(0) {
                loss_n
            } else {
                b.loss_at(&trained.theta, target)?
            };
            Ok(I2ORow {
                seed,
                n,
                delta_n: delta,
                loss_n,
                loss_n_dn,
                d_gap: loss_n_dn - loss_n,
                lower_bound: bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = ReportMeta {
        d_x: b.inner().d_x(),
        d_z: b.inner().d_z(),
        d_theta: b.inner().d_theta(),
        d_omega: b.outer().d_omega(),
        eta: Some(b.eta()),
        method: trainer.method(),
    };
    I2OReport::new(meta, rows)
}

fn check_avg_case_hypotheses(b: &Bilevel) -> Result<()> {
    let k_in = b.inner().k_in();
    if !k_in.is_square() || linops::rank(k_in)? < k_in.nrows() {
        return Err(Error::Hypothesis("K_in must be invertible".into()));
    }
    let k_out = b.outer().k_out();
    if !k_out.is_square() {
        return Err(Error::Hypothesis(
            "K_out must be square for its spectral radius to exist".into(),
        ));
    }
    if !b.outer().is_strongly_convex() {
        return Err(Error::Hypothesis(
            "outer loss must be strongly convex".into(),
        ));
    }
    Ok(())
}

pub(crate) fn avg_case_rhs_value(
    d_x: usize,
    d_theta: usize,
    rho_k_out: f64,
    r_max_sq: f64,
    omega_sq: f64,
) -> f64 {
    let prefactor = 1.0 - d_x.min(d_theta) as f64 / d_x as f64;
    -0.5 * prefactor * (rho_k_out * r_max_sq + omega_sq)
}

/// `−½ (1 − min(d_x, d_θ)/d_x) (ρ(K_out) ‖r_max‖² + ‖ω‖²)` with
/// `‖r_max‖² = max_{N ∈ n_grid} ‖r_N‖²`.
pub fn avg_case_rhs(b: &Bilevel, n_grid: &[usize]) -> Result<f64> {
    check_avg_case_hypotheses(b)?;
    if n_grid.is_empty() {
        return Err(Error::InvalidParameter("empty n grid".into()));
    }
    let mut r_max_sq: f64 = 0.0;
    for &n in n_grid {
        r_max_sq = r_max_sq.max(b.procedure(Horizon::Steps(n))?.r_n().norm_squared());
    }
    let rho = linops::spectrum(b.outer().k_out())?.spectral_radius;
    Ok(avg_case_rhs_value(
        b.inner().d_x(),
        b.inner().d_theta(),
        rho,
        r_max_sq,
        b.outer().omega().norm_squared(),
    ))
}

/// Display label of a trained outer solution, used in logs.
pub fn describe_trained(t: &TrainedOuter) -> String {
    format!(
        "{} n={} residual={:e} steps={}",
        t.method.as_str(),
        t.n_train,
        t.residual,
        t.steps_taken
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::AffineInnerProblem;
    use crate::outer::QuadraticOuterLoss;
    use alloc::vec;

    fn m1(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }
    fn v1(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    /// k_in = b = K_out = 1, c = 1, z0 = 0, η = 0.5, ω = 1.
    fn scalar_chain(u: f64) -> Bilevel {
        let inner = AffineInnerProblem::new(m1(1.0), m1(1.0), m1(u), v1(1.0)).unwrap();
        let outer = QuadraticOuterLoss::new(m1(1.0), v1(1.0)).unwrap();
        Bilevel::new(inner, outer, 0.5, v1(0.0)).unwrap()
    }

    #[test]
    fn bound_zero_u_scalar() {
        // r_2 = −0.75, P(C) = 1, P(0) = 0: −½ (−1.75)²
        assert_eq!(lower_bound(&scalar_chain(0.0), 2).unwrap(), -1.53125);
    }

    #[test]
    fn bound_vanishes_for_surjective_u() {
        let lb = lower_bound(&scalar_chain(-1.0), 3).unwrap();
        assert!(lb.abs() < 1e-10);
    }

    #[test]
    fn bound_vanishes_when_offset_is_zero() {
        // c = 0, z0 = 0 gives r_N = 0; ω = 0 makes v_N = 0.
        let inner = AffineInnerProblem::new(m1(1.0), m1(1.0), m1(0.0), v1(0.0)).unwrap();
        let outer = QuadraticOuterLoss::new(m1(1.0), v1(0.0)).unwrap();
        let b = Bilevel::new(inner, outer, 0.5, v1(0.0)).unwrap();
        assert_eq!(lower_bound(&b, 4).unwrap(), 0.0);
    }

    #[test]
    fn gap_examples() {
        let b = scalar_chain(0.0);
        let theta = v1(0.0);
        assert_eq!(d_gap(&b, &theta, 2, DeltaN::Steps(0)).unwrap(), 0.0);
        let to_limit = d_gap(&b, &theta, 2, DeltaN::Infinite).unwrap();
        assert!((to_limit - 0.46875).abs() < 1e-15);
        assert!(to_limit >= lower_bound(&b, 2).unwrap());
        assert!(d_gap(&b, &theta, 2, DeltaN::Steps(-2)).is_err());
        assert!(d_gap(&b, &theta, 2, DeltaN::Steps(-1)).is_ok());
    }

    #[test]
    fn gap_nonnegative_for_surjective_u() {
        let b = scalar_chain(-1.0);
        let t = b.train_closed_form(5).unwrap();
        for d in [-4, -1, 1, 3, 50] {
            assert!(d_gap(&b, &t.theta, 5, DeltaN::Steps(d)).unwrap() >= -1e-7);
        }
    }

    #[test]
    fn sweep_rows() {
        let b = scalar_chain(0.0);
        let grid = mixed_grid(2, 16, true);
        let report = sweep(&b, 2, &grid, Trainer::ClosedForm, 9).unwrap();
        assert_eq!(report.rows().len(), grid.len());
        let zero = report
            .rows()
            .iter()
            .find(|r| r.delta_n == DeltaN::Steps(0))
            .unwrap();
        assert_eq!(zero.d_gap, 0.0);
        assert!(report.rows().iter().all(|r| r.seed == 9));
        let last = report.rows().last().unwrap();
        assert_eq!(last.delta_n, DeltaN::Infinite);
        assert!((last.loss_n_dn - 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_rejects_violating_rows() {
        let meta = ReportMeta {
            d_x: 1,
            d_z: 1,
            d_theta: 1,
            d_omega: 1,
            eta: Some(0.5),
            method: TrainingMethod::ClosedForm,
        };
        let bad = I2ORow {
            seed: 0,
            n: 1,
            delta_n: DeltaN::Steps(1),
            loss_n: 1.0,
            loss_n_dn: 0.0,
            d_gap: -1.0,
            lower_bound: -0.5,
        };
        assert!(matches!(
            I2OReport::new(meta, vec![bad]),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn delta_parsing() {
        assert_eq!("inf".parse::<DeltaN>().unwrap(), DeltaN::Infinite);
        assert_eq!("-3".parse::<DeltaN>().unwrap(), DeltaN::Steps(-3));
        assert!("x".parse::<DeltaN>().is_err());
        assert_eq!(alloc::format!("{}", DeltaN::Steps(-3)), "-3");
    }

    #[test]
    fn grids() {
        let g = mixed_grid(3, 10, true);
        assert_eq!(
            g,
            vec![
                DeltaN::Steps(-2),
                DeltaN::Steps(-1),
                DeltaN::Steps(0),
                DeltaN::Steps(1),
                DeltaN::Steps(2),
                DeltaN::Steps(4),
                DeltaN::Steps(8),
                DeltaN::Steps(10),
                DeltaN::Infinite
            ]
        );
        assert_eq!(linear_grid(20, 200).len(), 220);
    }

    #[test]
    fn rhs_examples() {
        // d_θ ≥ d_x: prefactor vanishes.
        let b = scalar_chain(-1.0);
        assert_eq!(avg_case_rhs(&b, &[1, 5]).unwrap(), 0.0);
        // ρ(K_out) = 2, ‖r_max‖² = 1, ‖ω‖² = 1 with d_x = 2, d_θ = 1:
        // −½ · ½ · (2 + 1) = −0.75
        assert_eq!(avg_case_rhs_value(2, 1, 2.0, 1.0, 1.0), -0.75);
        // rank-deficient K_out violates the hypotheses.
        let inner = AffineInnerProblem::new(m1(1.0), m1(1.0), m1(1.0), v1(0.0)).unwrap();
        let outer = QuadraticOuterLoss::new(m1(0.0), v1(0.0)).unwrap();
        let b = Bilevel::new(inner, outer, 0.5, v1(0.0)).unwrap();
        assert!(matches!(avg_case_rhs(&b, &[1]), Err(Error::Hypothesis(_))));
    }
}

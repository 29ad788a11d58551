use alloc::format;
use alloc::vec::Vec;

use super::generate::{self, GradientDims};
use super::{avg_case_rhs_value, BoundParts};
use crate::linops::{self, SeededSource};
use crate::outer::Bilevel;
use crate::{Error, Result};

/// Square strongly convex scan.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgCaseConfig {
    /// `d_x = d_z = d`.
    pub d: usize,
    pub d_theta_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    /// Standard deviation of the entries of `K_out`.
    pub k_out_scale: f64,
}

impl AvgCaseConfig {
    /// `K_out` entries with variance `1/d`, so `ρ(K_out)` stays near 1.
    pub fn new(d: usize, d_theta_grid: Vec<usize>, n_grid: Vec<usize>) -> Self {
        let k_out_scale = 1.0 / libm::sqrt(d.max(1) as f64);
        Self {
            d,
            d_theta_grid,
            n_grid,
            k_out_scale,
        }
    }
}

/// Rank-deficient scan; `dims.d_theta` is ignored in favour of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NonConvexConfig {
    pub dims: GradientDims,
    pub d_theta_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCell {
    pub d_theta: usize,
    pub n: usize,
    pub lower_bound: f64,
    /// Average-case right-hand side when its hypotheses hold.
    pub rhs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedBounds {
    pub seed: u64,
    pub cells: Vec<SeedCell>,
}

fn check_grids(d_theta_grid: &[usize], n_grid: &[usize]) -> Result<usize> {
    if n_grid.is_empty() || d_theta_grid.is_empty() || d_theta_grid.contains(&0) {
        return Err(Error::InvalidParameter(
            "need non-empty grids and d_theta > 0".into(),
        ));
    }
    Ok(*d_theta_grid.iter().max().expect("non-empty"))
}

/// Bounds for every `(d_θ, N)`, using the leading `d_θ` columns of one `U`.
fn scan_template(
    template: &Bilevel,
    d_theta_grid: &[usize],
    n_grid: &[usize],
    with_rhs: bool,
) -> Result<Vec<SeedCell>> {
    let u = template.inner().u();
    let mut parts = Vec::with_capacity(n_grid.len());
    let mut r_max_sq: f64 = 0.0;
    for &n in n_grid {
        let p = BoundParts::new(template, n)?;
        r_max_sq = r_max_sq.max(p.r_n_sq);
        parts.push((n, p));
    }
    let rhs_inputs = if with_rhs {
        super::check_avg_case_hypotheses(template)?;
        Some((
            linops::spectrum(template.outer().k_out())?.spectral_radius,
            template.outer().omega().norm_squared(),
        ))
    } else {
        None
    };
    let d_x = template.inner().d_x();
    let mut cells = Vec::with_capacity(d_theta_grid.len() * n_grid.len());
    for &d_theta in d_theta_grid {
        let u_d = u.columns(0, d_theta).into_owned();
        let rhs = rhs_inputs
            .map(|(rho, omega_sq)| avg_case_rhs_value(d_x, d_theta, rho, r_max_sq, omega_sq));
        for (n, p) in &parts {
            cells.push(SeedCell {
                d_theta,
                n: *n,
                lower_bound: p.bound(&u_d)?,
                rhs,
            });
        }
    }
    Ok(cells)
}

/// One seed of [`monte_carlo_avg_case`].
pub fn avg_case_seed(cfg: &AvgCaseConfig, seed: u64) -> Result<SeedBounds> {
    let widest = check_grids(&cfg.d_theta_grid, &cfg.n_grid)?;
    let template =
        generate::strongly_convex(&SeededSource::new(seed), cfg.d, widest, cfg.k_out_scale)?;
    Ok(SeedBounds {
        seed,
        cells: scan_template(&template, &cfg.d_theta_grid, &cfg.n_grid, true)?,
    })
}

/// One seed of [`non_strongly_convex_scan`].
pub fn nonconvex_seed(cfg: &NonConvexConfig, seed: u64) -> Result<SeedBounds> {
    let widest = check_grids(&cfg.d_theta_grid, &cfg.n_grid)?;
    let dims = GradientDims {
        d_theta: widest,
        ..cfg.dims
    };
    let template = generate::gradient_instance(&SeededSource::new(seed), dims)?;
    Ok(SeedBounds {
        seed,
        cells: scan_template(&template, &cfg.d_theta_grid, &cfg.n_grid, false)?,
    })
}

/// Seed aggregate of one `(d_θ, N)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgCell {
    pub d_theta: usize,
    pub n: usize,
    /// Mean of `−lower_bound`.
    pub mean_magnitude: f64,
    pub magnitude_std_err: f64,
    pub mean_rhs: Option<f64>,
    /// Mean and standard error of `lower_bound − rhs` over seeds.
    pub mean_excess: Option<f64>,
    pub excess_std_err: Option<f64>,
}

/// Absolute slack added to Monte Carlo margins so that cells where bound and
/// rhs both vanish are not failed on rounding.
pub const MC_ABS_FLOOR: f64 = 1e-12;

impl AvgCell {
    /// Mean bound is at least `rhs − sigmas · SE − MC_ABS_FLOOR`; vacuous
    /// without an rhs.
    pub fn respects_rhs(&self, sigmas: f64) -> bool {
        match (self.mean_excess, self.excess_std_err) {
            (Some(m), Some(se)) => m >= -(sigmas * se + MC_ABS_FLOOR),
            _ => true,
        }
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, libm::sqrt(var / k))
}

/// Per-seed bounds and their aggregates, in seed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgCaseReport {
    per_seed: Vec<SeedBounds>,
    cells: Vec<AvgCell>,
}

impl AvgCaseReport {
    /// Sorts by seed, then aggregates; all seeds must share one cell layout.
    pub fn from_seeds(mut per_seed: Vec<SeedBounds>) -> Result<Self> {
        per_seed.sort_by_key(|s| s.seed);
        let first = per_seed
            .first()
            .ok_or_else(|| Error::InvalidParameter("no seeds".into()))?;
        let layout: Vec<(usize, usize)> = first.cells.iter().map(|c| (c.d_theta, c.n)).collect();
        for s in &per_seed {
            let same = s.cells.len() == layout.len()
                && s.cells
                    .iter()
                    .zip(&layout)
                    .all(|(c, l)| (c.d_theta, c.n) == *l);
            if !same {
                return Err(Error::InvalidParameter(format!(
                    "seed {} has a different cell layout",
                    s.seed
                )));
            }
            if let Some(c) = s
                .cells
                .iter()
                .find(|c| c.lower_bound.is_nan() || c.lower_bound > 0.0)
            {
                return Err(Error::InvariantViolation(format!(
                    "seed {} d_theta {} n {}: positive bound {:e}",
                    s.seed, c.d_theta, c.n, c.lower_bound
                )));
            }
        }
        let cells = layout
            .iter()
            .enumerate()
            .map(|(i, &(d_theta, n))| {
                let mags: Vec<f64> = per_seed.iter().map(|s| -s.cells[i].lower_bound).collect();
                let (mean_magnitude, magnitude_std_err) = mean_and_se(&mags);
                let excess: Option<Vec<f64>> = per_seed
                    .iter()
                    .map(|s| s.cells[i].rhs.map(|r| s.cells[i].lower_bound - r))
                    .collect();
                let rhs: Option<Vec<f64>> = per_seed.iter().map(|s| s.cells[i].rhs).collect();
                let excess_stats = excess.map(|e| mean_and_se(&e));
                AvgCell {
                    d_theta,
                    n,
                    mean_magnitude,
                    magnitude_std_err,
                    mean_rhs: rhs.map(|r| mean_and_se(&r).0),
                    mean_excess: excess_stats.map(|s| s.0),
                    excess_std_err: excess_stats.map(|s| s.1),
                }
            })
            .collect();
        Ok(Self { per_seed, cells })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.per_seed.iter().map(|s| s.seed).collect()
    }

    pub fn per_seed(&self) -> &[SeedBounds] {
        &self.per_seed
    }

    pub fn cells(&self) -> &[AvgCell] {
        &self.cells
    }

    pub fn cell(&self, d_theta: usize, n: usize) -> Option<&AvgCell> {
        self.cells.iter().find(|c| c.d_theta == d_theta && c.n == n)
    }

    pub fn d_theta_grid(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.cells.iter().map(|c| c.d_theta).collect();
        g.dedup();
        g
    }

    pub fn n_grid(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.cells.iter().map(|c| c.n).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Cells whose mean bound falls below the rhs by more than `sigmas`
    /// standard errors.
    pub fn rhs_violations(&self, sigmas: f64) -> Vec<&AvgCell> {
        self.cells
            .iter()
            .filter(|c| !c.respects_rhs(sigmas))
            .collect()
    }

    /// For every `N`, mean magnitudes do not increase with `d_θ` beyond `tol`.
    pub fn magnitude_non_increasing(&self, tol: f64) -> bool {
        self.n_grid().iter().all(|&n| {
            let series: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.n == n)
                .map(|c| c.mean_magnitude)
                .collect();
            series.windows(2).all(|w| w[1] <= w[0] + tol)
        })
    }

    /// Population standard deviation over mean across the `N` grid of the
    /// mean magnitudes at `d_θ`; zero when the mean vanishes.
    pub fn coefficient_of_variation(&self, d_theta: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.d_theta == d_theta)
            .map(|c| c.mean_magnitude)
            .collect();
        if xs.is_empty() {
            return None;
        }
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        if mean <= 0.0 {
            return Some(0.0);
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
        Some(libm::sqrt(var) / mean)
    }

    /// Seeds where some `d_θ` below `full` reaches a bound of magnitude at
    /// most `tol` for every `N`, with the smallest such `d_θ`.
    pub fn early_zero_bounds(&self, full: usize, tol: f64) -> Vec<(u64, usize)> {
        let ns = self.n_grid();
        self.per_seed
            .iter()
            .filter_map(|s| {
                self.d_theta_grid()
                    .into_iter()
                    .filter(|&d| d < full)
                    .find(|&d| {
                        ns.iter().all(|&n| {
                            s.cells
                                .iter()
                                .any(|c| c.d_theta == d && c.n == n && -c.lower_bound <= tol)
                        })
                    })
                    .map(|d| (s.seed, d))
            })
            .collect()
    }
}

/// Sequential scan over `seeds`; callers wanting parallelism run
/// [`avg_case_seed`] themselves and aggregate with
/// [`AvgCaseReport::from_seeds`].
pub fn monte_carlo_avg_case(cfg: &AvgCaseConfig, seeds: &[u64]) -> Result<AvgCaseReport> {
    let per_seed = seeds
        .iter()
        .map(|&s| avg_case_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    AvgCaseReport::from_seeds(per_seed)
}

pub fn non_strongly_convex_scan(cfg: &NonConvexConfig, seeds: &[u64]) -> Result<AvgCaseReport> {
    let per_seed = seeds
        .iter()
        .map(|&s| nonconvex_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    AvgCaseReport::from_seeds(per_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn full_width_bound_vanishes() {
        let cfg = AvgCaseConfig::new(6, vec![1, 3, 6], vec![5, 20]);
        let r = monte_carlo_avg_case(&cfg, &[3, 1, 2]).unwrap();
        assert_eq!(r.seeds(), vec![1, 2, 3]);
        for n in [5, 20] {
            assert!(r.cell(6, n).unwrap().mean_magnitude < 1e-10);
            assert_eq!(r.cell(6, n).unwrap().mean_rhs, Some(0.0));
        }
        assert!(r.cell(1, 5).unwrap().mean_magnitude > 0.0);
    }

    #[test]
    fn nonconvex_reaches_zero_early() {
        let cfg = NonConvexConfig {
            dims: GradientDims {
                d_z: 10,
                inner_rank: 7,
                d_theta: 0,
                d_omega: 10,
                outer_rank: 5,
            },
            d_theta_grid: vec![2, 5, 7],
            n_grid: vec![10],
        };
        let r = non_strongly_convex_scan(&cfg, &[0, 1]).unwrap();
        assert!(r.cells().iter().all(|c| c.mean_rhs.is_none()));
        assert_eq!(r.early_zero_bounds(7, 1e-9), vec![(0, 5), (1, 5)]);
    }

    #[test]
    fn stats() {
        let (m, se) = mean_and_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}

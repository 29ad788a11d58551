//! Command execution. Seed-level work runs on a rayon pool and is collected
//! in seed order, so the written bytes never depend on scheduling.

use std::path::{Path, PathBuf};

use i2o_core::inner::DEFAULT_N_MAX;
use i2o_core::metalin::{self, LinearTask, MetaConfig};
use i2o_core::theory::{
    self,
    generate::{self, GradientDims},
    AvgCaseConfig, AvgCaseReport, NonConvexConfig, MC_ABS_FLOOR,
};
use i2o_core::{Bilevel, Horizon, I2OReport, SeededSource, Vector};
use rayon::prelude::*;

use crate::config::{self, Command, Generator, Plan};
use crate::csvio::{self, IftRow};
use crate::error::{CliError, Result};
use crate::fixture::{self, Fixture};
use crate::plot;

/// Standard errors of slack allowed between the Monte Carlo mean of the
/// bound and the average-case right-hand side.
pub const RHS_SIGMAS: f64 = 3.0;
/// Relative tolerance on the loss difference between the two trainers.
pub const IFT_LOSS_TOL: f64 = 1e-7;
/// Largest accepted characterization residual of a trained parameter.
pub const IFT_RESIDUAL_TOL: f64 = 1e-6;

pub const THREADS_ENV: &str = "I2O_THREADS";

/// What a successful command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Worker count from `I2O_THREADS`, or `None` for rayon's default.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(Some(k)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Runs `plan` on a pool capped at `threads` workers.
pub fn run(plan: &Plan, threads: Option<usize>) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(plan))
}

fn dispatch(plan: &Plan) -> Result<Outcome> {
    if plan.command != Command::Validate {
        config::prepare_out(&plan.out)?;
    }
    match plan.command {
        Command::Validate => validate(plan),
        Command::Sweep => sweep(plan, "sweep"),
        Command::LowerboundScan => sweep(plan, "lowerbound"),
        Command::Avgcase => avgcase(plan),
        Command::NonconvexScan => nonconvex(plan),
        Command::IftVsUnroll => ift_vs_unroll(plan),
        Command::ImamlDemo => imaml(plan),
    }
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes `name.csv` and the chart rendered from it.
fn write_csv_and_plot(out: &Path, name: &str, csv: &str) -> Result<Vec<PathBuf>> {
    let csv_path = write(&out.join(format!("{name}.csv")), csv)?;
    let svg_path = out.join(format!("{name}.svg"));
    plot::plot_csv(&csv_path, &svg_path)?;
    Ok(vec![csv_path, svg_path])
}

/// Problem for one seed, from the configured generator.
pub fn instance(plan: &Plan, seed: u64) -> Result<Bilevel> {
    let i = &plan.instance;
    let src = SeededSource::new(seed);
    let b = match i.generator {
        Generator::Gradient => generate::gradient_instance(
            &src,
            GradientDims {
                d_z: i.d_z,
                inner_rank: i.d_x,
                d_theta: i.d_theta,
                d_omega: i.d_omega,
                outer_rank: i.outer_rank,
            },
        )?,
        Generator::General => generate::general_valid(&src, i.max_dim)?,
        Generator::StronglyConvex => {
            generate::strongly_convex(&src, i.d_z, i.d_theta, i.k_out_scale)?
        }
        Generator::WellConditioned => {
            generate::well_conditioned_gradient(&src, i.d_z, i.d_x, i.d_theta)?
        }
        Generator::File => {
            let path = i.problem.as_ref().expect("validated");
            fixture::problem_from_fixture(&Fixture::load(path)?)?
        }
    };
    match i.eta {
        Some(eta) => Ok(Bilevel::new(
            b.inner().clone(),
            b.outer().clone(),
            eta,
            b.z0().clone(),
        )?),
        None => Ok(b),
    }
}

fn validate(plan: &Plan) -> Result<Outcome> {
    let path = plan
        .instance
        .problem
        .as_ref()
        .ok_or_else(|| CliError::Config("validate needs a problem fixture".into()))?;
    let f = Fixture::load(path)?;
    let inner = fixture::inner_from_fixture(&f)?;
    let v = inner.validate();
    if !v.passed() {
        return Err(CliError::Config(format!(
            "{}: {}",
            path.display(),
            v.issues.join("; ")
        )));
    }
    let b = fixture::problem_from_fixture(&f)?;
    let eta = plan.instance.eta.unwrap_or(b.eta());
    let n0 = inner.invertibility_threshold(eta, DEFAULT_N_MAX)?;
    let rho = v.spectrum.as_ref().map_or(f64::NAN, |s| s.spectral_radius);
    Ok(Outcome {
        files: vec![],
        summary: format!(
            "{}: valid (d_x = {}, d_z = {}, d_theta = {}, rank K_in = {}, eta = {eta}, \
             spectral radius = {rho:e}, invertibility threshold = {n0})",
            path.display(),
            v.d_x,
            v.d_z,
            inner.d_theta(),
            v.k_in_rank,
        ),
    })
}

/// Reports of every seed and `N`, concatenated in seed order.
pub fn sweep_report(plan: &Plan) -> Result<I2OReport> {
    let per_seed = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let b = instance(plan, seed)?;
            let mut reports = Vec::with_capacity(plan.grid.n.len());
            for &n in &plan.grid.n {
                let grid = plan.grid.deltas(n);
                reports.push(theory::sweep(&b, n, &grid, plan.trainer, seed)?);
            }
            if plan.save_trained {
                for &n in &plan.grid.n {
                    let t = plan.trainer.train(&b, n)?;
                    let name = format!("trained_seed{seed}_n{n}.txt");
                    fixture::trained_to_fixture(&t).save(&plan.out.join(name))?;
                }
            }
            Ok(reports)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(I2OReport::concat(per_seed.into_iter().flatten().collect())?)
}

fn sweep(plan: &Plan, name: &str) -> Result<Outcome> {
    let report = sweep_report(plan)?;
    let files = write_csv_and_plot(&plan.out, name, &csvio::sweep_csv(report.rows()))?;
    let violations = report.violations();
    if let Some(r) = violations.first() {
        return Err(CliError::Invariant(format!(
            "{} rows break the lower bound; first: seed {}, n {}, delta_n {}, d_gap {:e} < {:e}",
            violations.len(),
            r.seed,
            r.n,
            r.delta_n,
            r.d_gap,
            r.lower_bound
        )));
    }
    let mins = report.min_gap_per_seed();
    let worst = mins.iter().map(|r| r.d_gap).fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        files,
        summary: format!(
            "{} rows over {} seeds, no bound violations; smallest gap {worst:e}",
            report.rows().len(),
            plan.seeds.len()
        ),
    })
}

fn avg_case_config(plan: &Plan) -> AvgCaseConfig {
    AvgCaseConfig {
        d: plan.instance.d_z,
        d_theta_grid: plan.grid.d_theta.clone(),
        n_grid: plan.grid.n.clone(),
        k_out_scale: plan.instance.k_out_scale,
    }
}

pub fn avgcase_report(plan: &Plan) -> Result<AvgCaseReport> {
    let cfg = avg_case_config(plan);
    let per_seed = plan
        .seeds
        .par_iter()
        .map(|&s| theory::avg_case_seed(&cfg, s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AvgCaseReport::from_seeds(per_seed)?)
}

fn nonconvex_config(plan: &Plan) -> NonConvexConfig {
    let i = &plan.instance;
    NonConvexConfig {
        dims: GradientDims {
            d_z: i.d_z,
            inner_rank: i.d_x,
            d_theta: i.d_theta,
            d_omega: i.d_omega,
            outer_rank: i.outer_rank,
        },
        d_theta_grid: plan.grid.d_theta.clone(),
        n_grid: plan.grid.n.clone(),
    }
}

pub fn nonconvex_report(plan: &Plan) -> Result<AvgCaseReport> {
    let cfg = nonconvex_config(plan);
    let per_seed = plan
        .seeds
        .par_iter()
        .map(|&s| theory::nonconvex_seed(&cfg, s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AvgCaseReport::from_seeds(per_seed)?)
}

fn write_scan(plan: &Plan, name: &str, report: &AvgCaseReport) -> Result<Vec<PathBuf>> {
    let mut files = write_csv_and_plot(&plan.out, name, &csvio::avgcase_csv(report))?;
    files.push(write(
        &plan.out.join(format!("{name}_summary.csv")),
        &csvio::summary_csv(report),
    )?);
    Ok(files)
}

fn avgcase(plan: &Plan) -> Result<Outcome> {
    let report = avgcase_report(plan)?;
    let files = write_scan(plan, "avgcase", &report)?;
    let bad = report.rhs_violations(RHS_SIGMAS);
    if let Some(c) = bad.first() {
        return Err(CliError::Invariant(format!(
            "mean bound below the average-case rhs by more than {RHS_SIGMAS} standard errors \
             (+{MC_ABS_FLOOR:e}) at d_theta = {}, n = {}: excess {:e}, std err {:e}",
            c.d_theta,
            c.n,
            c.mean_excess.unwrap_or(f64::NAN),
            c.excess_std_err.unwrap_or(f64::NAN)
        )));
    }
    let trend = if report.magnitude_non_increasing(0.0) {
        "non-increasing"
    } else {
        "not monotone"
    };
    Ok(Outcome {
        files,
        summary: format!(
            "{} seeds, {} cells within the average-case rhs; mean magnitude {trend} in d_theta",
            plan.seeds.len(),
            report.cells().len()
        ),
    })
}

fn nonconvex(plan: &Plan) -> Result<Outcome> {
    let report = nonconvex_report(plan)?;
    let files = write_scan(plan, "nonconvex", &report)?;
    let zeros = report.early_zero_bounds(plan.instance.d_x, 1e-9);
    Ok(Outcome {
        files,
        summary: format!(
            "{} seeds; {} (seed, d_theta < {}) pairs with a bound of magnitude <= 1e-9",
            plan.seeds.len(),
            zeros.len(),
            plan.instance.d_x
        ),
    })
}

/// Trains with implicit differentiation and with unrolling at `N`, the
/// larger of the configured value and the invertibility threshold.
pub fn ift_rows(plan: &Plan) -> Result<Vec<IftRow>> {
    let rows = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let b = instance(plan, seed)?;
            let n0 = b.inner().invertibility_threshold(b.eta(), DEFAULT_N_MAX)?;
            let theta0 = Vector::zeros(b.inner().d_theta());
            plan.grid
                .n
                .iter()
                .map(|&n_cfg| {
                    let n = n_cfg.max(n0);
                    let ift = b.train_ift(n, &plan.descent, &theta0)?;
                    let unrolled = b.train_unrolled_gd(n, &plan.descent, &theta0)?;
                    Ok(IftRow {
                        seed,
                        n,
                        loss_ift: b.loss_at(&ift.theta, Horizon::Steps(n))?,
                        loss_unrolled: b.loss_at(&unrolled.theta, Horizon::Steps(n))?,
                        residual_ift: b.characterization_residual(&ift.theta, n)?,
                        residual_unrolled: b.characterization_residual(&unrolled.theta, n)?,
                        steps_ift: ift.steps_taken,
                        steps_unrolled: unrolled.steps_taken,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Whether the two trainers agree on `r`.
pub fn ift_row_agrees(r: &IftRow) -> bool {
    (r.loss_ift - r.loss_unrolled).abs() <= IFT_LOSS_TOL * (1.0 + r.loss_unrolled)
        && r.residual_ift <= IFT_RESIDUAL_TOL
        && r.residual_unrolled <= IFT_RESIDUAL_TOL
}

fn ift_vs_unroll(plan: &Plan) -> Result<Outcome> {
    let rows = ift_rows(plan)?;
    let path = write(&plan.out.join("ift_vs_unroll.csv"), &csvio::ift_csv(&rows))?;
    if let Some(r) = rows.iter().find(|r| !ift_row_agrees(r)) {
        return Err(CliError::Invariant(format!(
            "trainers disagree at seed {}, n {}: losses {:e} vs {:e}, residuals {:e} vs {:e}",
            r.seed, r.n, r.loss_ift, r.loss_unrolled, r.residual_ift, r.residual_unrolled
        )));
    }
    let worst = rows
        .iter()
        .map(|r| (r.loss_ift - r.loss_unrolled).abs())
        .fold(0.0, f64::max);
    Ok(Outcome {
        files: vec![path],
        summary: format!(
            "{} runs agree; largest loss difference {worst:e}",
            rows.len()
        ),
    })
}

/// Random regression tasks sharing one input dimension. With
/// `conflicting`, every odd task copies its predecessor's inputs and negates
/// its targets.
pub fn generated_tasks(spec: &config::MetaSpec, seed: u64) -> Result<MetaConfig> {
    let mut s = SeededSource::new(seed).stream();
    let mut tasks: Vec<LinearTask> = Vec::with_capacity(spec.tasks);
    for i in 0..spec.tasks {
        let task = match tasks.last() {
            Some(prev) if spec.conflicting && i % 2 == 1 => LinearTask::new(
                prev.x_train().clone(),
                -prev.y_train(),
                prev.x_val().clone(),
                -prev.y_val(),
            )?,
            _ => {
                let w = s.vector(spec.dim);
                let x_train = s.matrix(spec.samples, spec.dim);
                let x_val = s.matrix(spec.val_samples, spec.dim);
                let y_train = &x_train * &w + s.vector(spec.samples) * 0.1;
                let y_val = &x_val * &w + s.vector(spec.val_samples) * 0.1;
                LinearTask::new(x_train, y_train, x_val, y_val)?
            }
        };
        tasks.push(task);
    }
    Ok(MetaConfig::new(spec.lambda, tasks)?)
}

fn imaml(plan: &Plan) -> Result<Outcome> {
    let configs = plan
        .seeds
        .iter()
        .map(|&seed| match &plan.meta.manifest {
            Some(path) => fixture::meta_from_fixture(&Fixture::load(path)?),
            None => generated_tasks(&plan.meta, seed),
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = plan
        .seeds
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&seed, cfg)| {
            let b = metalin::build(cfg, plan.instance.eta)?;
            plan.grid
                .n
                .iter()
                .map(|&n| {
                    Ok(theory::sweep(
                        &b,
                        n,
                        &plan.grid.deltas(n),
                        plan.trainer,
                        seed,
                    )?)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let report = I2OReport::concat(reports.into_iter().flatten().collect())?;
    let mut files = write_csv_and_plot(&plan.out, "imaml", &csvio::sweep_csv(report.rows()))?;
    let first = &configs[0];
    files.push(plan.out.join("tasks.txt"));
    fixture::meta_to_fixture(first).save(&plan.out.join("tasks.txt"))?;
    if let Some(r) = report.violations().first() {
        return Err(CliError::Invariant(format!(
            "seed {}, n {}, delta_n {}: d_gap {:e} below bound {:e}",
            r.seed, r.n, r.delta_n, r.d_gap, r.lower_bound
        )));
    }
    let bound = report
        .rows()
        .iter()
        .map(|r| r.lower_bound)
        .fold(0.0, f64::min);
    Ok(Outcome {
        files,
        summary: format!(
            "{} tasks of dimension {}, lambda = {}; most negative lower bound {bound:e}",
            first.tasks().len(),
            first.dim(),
            first.lambda()
        ),
    })
}

//! Experiment configuration: a TOML file over per-command defaults, with
//! command-line overrides applied last.
//!
//! ```toml
//! out = "out/fig1-left"
//! seed_count = 20            # or: seeds = [0, 4, 9]
//!
//! [instance]
//! generator = "gradient"     # gradient | general | strongly_convex | well_conditioned | file
//! d_z = 5
//! d_x = 4
//! d_theta = 4
//! d_omega = 5
//! outer_rank = 3
//!
//! [grid]
//! n = [20]
//! delta_max = 200
//! spacing = "linear"         # or "geometric"
//! infinite = true
//!
//! [train]
//! method = "closed_form"     # closed_form | unrolled_gd | ift_gd
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use i2o_core::theory::{self, DeltaN, Trainer};
use i2o_core::{DescentOptions, TrainingMethod};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    Validate,
    Sweep,
    LowerboundScan,
    Avgcase,
    NonconvexScan,
    IftVsUnroll,
    ImamlDemo,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Validate,
        Command::Sweep,
        Command::LowerboundScan,
        Command::Avgcase,
        Command::NonconvexScan,
        Command::IftVsUnroll,
        Command::ImamlDemo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Sweep => "sweep",
            Command::LowerboundScan => "lowerbound-scan",
            Command::Avgcase => "avgcase",
            Command::NonconvexScan => "nonconvex-scan",
            Command::IftVsUnroll => "ift-vs-unroll",
            Command::ImamlDemo => "imaml-demo",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `B = K_in`, Gaussian `K_in` of full row rank, rank-limited `K_out`.
    Gradient,
    /// Random dimensions and a non-symmetric `B`.
    General,
    /// Square `K_in = I + 0.1 G` and invertible scaled Gaussian `K_out`.
    StronglyConvex,
    /// `B = K_in` near the identity and `K_out = I + 0.1 G`.
    WellConditioned,
    /// Read from the `problem` fixture.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Geometric,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub seed_count: Option<u64>,
    #[serde(default)]
    pub instance: RawInstance,
    #[serde(default)]
    pub grid: RawGrid,
    #[serde(default)]
    pub train: RawTrain,
    #[serde(default)]
    pub meta: RawMeta,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInstance {
    pub generator: Option<Generator>,
    pub d_z: Option<usize>,
    pub d_x: Option<usize>,
    pub d_theta: Option<usize>,
    pub d_omega: Option<usize>,
    pub outer_rank: Option<usize>,
    pub max_dim: Option<usize>,
    pub k_out_scale: Option<f64>,
    pub problem: Option<PathBuf>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub n: Option<Vec<usize>>,
    pub delta_min: Option<i64>,
    pub delta_max: Option<i64>,
    /// `delta_max` as a multiple of `N`; used when `delta_max` is absent.
    pub delta_max_factor: Option<i64>,
    pub spacing: Option<Spacing>,
    pub infinite: Option<bool>,
    pub d_theta: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub method: Option<String>,
    pub max_steps: Option<usize>,
    pub tol: Option<f64>,
    pub step_size: Option<f64>,
    pub save: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    pub manifest: Option<PathBuf>,
    pub tasks: Option<usize>,
    pub dim: Option<usize>,
    pub samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub lambda: Option<f64>,
    /// Alternate the sign of the task targets.
    pub conflicting: Option<bool>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| CliError::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seed_count: Option<u64>,
    pub out: Option<PathBuf>,
    pub eta: Option<f64>,
    pub trainer: Option<String>,
    pub n: Option<Vec<usize>>,
    pub problem: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub generator: Generator,
    pub d_z: usize,
    pub d_x: usize,
    pub d_theta: usize,
    pub d_omega: usize,
    pub outer_rank: usize,
    pub max_dim: usize,
    pub k_out_scale: f64,
    pub problem: Option<PathBuf>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub delta_min: Option<i64>,
    pub delta_max: Option<i64>,
    pub delta_max_factor: i64,
    pub spacing: Spacing,
    pub infinite: bool,
    pub d_theta: Vec<usize>,
}

impl GridSpec {
    /// `ΔN` values for a run trained with `n` inner iterations.
    pub fn deltas(&self, n: usize) -> Vec<DeltaN> {
        let lo = self.delta_min.unwrap_or(1 - n as i64);
        let hi = self.delta_max.unwrap_or(self.delta_max_factor * n as i64);
        let mut grid: Vec<DeltaN> = match self.spacing {
            Spacing::Linear => (lo..=hi).map(DeltaN::Steps).collect(),
            Spacing::Geometric => theory::mixed_grid(n, hi, false)
                .into_iter()
                .filter(|d| matches!(d, DeltaN::Steps(s) if *s >= lo))
                .collect(),
        };
        if self.infinite {
            grid.push(DeltaN::Infinite);
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSpec {
    pub manifest: Option<PathBuf>,
    pub tasks: usize,
    pub dim: usize,
    pub samples: usize,
    pub val_samples: usize,
    pub lambda: f64,
    pub conflicting: bool,
}

/// Fully resolved and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub command: Command,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub instance: InstanceSpec,
    pub grid: GridSpec,
    pub trainer: Trainer,
    /// Descent settings from `[train]`, also used when comparing trainers.
    pub descent: DescentOptions,
    pub save_trained: bool,
    pub meta: MetaSpec,
}

fn base_plan(command: Command) -> Plan {
    let instance = InstanceSpec {
        generator: Generator::Gradient,
        d_z: 5,
        d_x: 4,
        d_theta: 4,
        d_omega: 5,
        outer_rank: 3,
        max_dim: 12,
        k_out_scale: 1.0,
        problem: None,
        eta: None,
    };
    let grid = GridSpec {
        n: vec![20],
        delta_min: None,
        delta_max: Some(200),
        delta_max_factor: 5,
        spacing: Spacing::Linear,
        infinite: true,
        d_theta: vec![],
    };
    let meta = MetaSpec {
        manifest: None,
        tasks: 4,
        dim: 3,
        samples: 5,
        val_samples: 4,
        lambda: 1.0,
        conflicting: false,
    };
    let mut plan = Plan {
        command,
        seeds: (0..20).collect(),
        out: PathBuf::from("out").join(command.as_str()),
        instance,
        grid,
        trainer: Trainer::ClosedForm,
        descent: DescentOptions::default(),
        save_trained: false,
        meta,
    };
    match command {
        Command::Validate => {
            plan.seeds = vec![0];
            plan.instance.generator = Generator::File;
        }
        Command::Sweep => {}
        Command::LowerboundScan => {
            plan.seeds = (0..50).collect();
            plan.instance.generator = Generator::General;
            plan.grid.n = vec![1, 4, 12];
            plan.grid.delta_max = None;
        }
        Command::Avgcase => {
            plan.instance.generator = Generator::StronglyConvex;
            plan.instance.d_z = 20;
            plan.instance.d_x = 20;
            plan.instance.d_omega = 20;
            plan.instance.k_out_scale = 1.0 / 20f64.sqrt();
            plan.grid.n = vec![10, 50, 100, 200];
            plan.grid.d_theta = vec![2, 5, 10, 15, 20];
        }
        Command::NonconvexScan => {
            plan.instance.d_z = 10;
            plan.instance.d_x = 7;
            plan.instance.d_omega = 10;
            plan.instance.outer_rank = 5;
            plan.grid.n = vec![10, 50];
            plan.grid.d_theta = (1..=7).collect();
        }
        Command::IftVsUnroll => {
            plan.instance.generator = Generator::WellConditioned;
            plan.instance.d_z = 6;
            plan.instance.d_x = 4;
            plan.instance.d_theta = 6;
            plan.instance.d_omega = 6;
            plan.descent.tol = 1e-12;
        }
        Command::ImamlDemo => {
            plan.seeds = vec![0];
            plan.grid.n = vec![10];
            plan.grid.delta_max = Some(256);
            plan.grid.spacing = Spacing::Geometric;
        }
    }
    plan
}

fn descent_from(train: &RawTrain, defaults: DescentOptions) -> DescentOptions {
    DescentOptions {
        max_steps: train.max_steps.unwrap_or(defaults.max_steps),
        step_size: train.step_size.or(defaults.step_size),
        tol: train.tol.unwrap_or(defaults.tol),
    }
}

fn trainer_from(name: &str, opts: DescentOptions) -> Result<Trainer> {
    let method: TrainingMethod = name
        .parse()
        .map_err(|_| CliError::Config(format!("unknown trainer `{name}`")))?;
    Ok(match method {
        TrainingMethod::ClosedForm => Trainer::ClosedForm,
        TrainingMethod::UnrolledGd => Trainer::UnrolledGd(opts),
        TrainingMethod::IftGd => Trainer::Ift(opts),
    })
}

fn positive(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CliError::Config(format!(
            "{name} must be positive, got {x}"
        )))
    }
}

/// Merges defaults, file and flags, then validates.
pub fn resolve(command: Command, raw: &RawConfig, flags: &Overrides) -> Result<Plan> {
    if let Some(c) = &raw.command {
        let named: Command = c.parse()?;
        if named != command {
            return Err(CliError::Config(format!(
                "config is for `{named}` but `{command}` was requested"
            )));
        }
    }
    let mut plan = base_plan(command);

    if raw.seeds.is_some() && raw.seed_count.is_some() {
        return Err(CliError::Config("give either seeds or seed_count".into()));
    }
    if let Some(s) = &raw.seeds {
        plan.seeds = s.clone();
    }
    if let Some(k) = raw.seed_count {
        plan.seeds = (0..k).collect();
    }
    if let Some(k) = flags.seed_count {
        plan.seeds = (0..k).collect();
    }
    if let Some(s) = flags.seed {
        plan.seeds = vec![s];
    }
    if let Some(o) = flags.out.as_ref().or(raw.out.as_ref()) {
        plan.out = o.clone();
    }

    let ri = &raw.instance;
    let inst = &mut plan.instance;
    macro_rules! take {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    take!(inst.generator, ri.generator);
    take!(inst.d_z, ri.d_z);
    take!(inst.d_x, ri.d_x);
    take!(inst.d_theta, ri.d_theta);
    take!(inst.d_omega, ri.d_omega);
    take!(inst.outer_rank, ri.outer_rank);
    take!(inst.max_dim, ri.max_dim);
    take!(inst.k_out_scale, ri.k_out_scale);
    if command == Command::Avgcase && ri.d_z.is_some() && ri.k_out_scale.is_none() {
        inst.k_out_scale = 1.0 / (inst.d_z as f64).sqrt();
    }
    inst.problem = flags.problem.clone().or_else(|| ri.problem.clone());
    if inst.problem.is_some() && ri.generator.is_none() {
        inst.generator = Generator::File;
    }
    inst.eta = flags.eta.or(ri.eta);

    let rg = &raw.grid;
    let grid = &mut plan.grid;
    take!(grid.n, rg.n.clone());
    take!(grid.n, flags.n.clone());
    grid.delta_min = rg.delta_min.or(grid.delta_min);
    if rg.delta_max.is_some() || rg.delta_max_factor.is_some() {
        grid.delta_max = rg.delta_max;
    }
    take!(grid.delta_max_factor, rg.delta_max_factor);
    take!(grid.spacing, rg.spacing);
    take!(grid.infinite, rg.infinite);
    take!(grid.d_theta, rg.d_theta.clone());

    let method = flags
        .trainer
        .clone()
        .or_else(|| raw.train.method.clone())
        .unwrap_or_else(|| "closed_form".into());
    plan.descent = descent_from(&raw.train, plan.descent);
    plan.trainer = trainer_from(&method, plan.descent)?;
    plan.save_trained = raw.train.save.unwrap_or(false);

    let rm = &raw.meta;
    let meta = &mut plan.meta;
    meta.manifest = rm.manifest.clone();
    take!(meta.tasks, rm.tasks);
    take!(meta.dim, rm.dim);
    take!(meta.samples, rm.samples);
    take!(meta.val_samples, rm.val_samples);
    take!(meta.lambda, rm.lambda);
    take!(meta.conflicting, rm.conflicting);

    validate(&plan)?;
    Ok(plan)
}

fn validate(plan: &Plan) -> Result<()> {
    let bad = |m: String| Err(CliError::Config(m));
    if plan.seeds.is_empty() {
        return bad("seed list is empty".into());
    }
    let distinct: BTreeSet<_> = plan.seeds.iter().collect();
    if distinct.len() != plan.seeds.len() {
        return bad("seeds must be distinct".into());
    }
    let g = &plan.grid;
    if g.n.is_empty() {
        return bad("n grid is empty".into());
    }
    if g.n.contains(&0) && plan.command != Command::Avgcase {
        return bad("n must be at least 1".into());
    }
    if let Some(lo) = g.delta_min {
        if let Some(&n) = g.n.iter().find(|&&n| lo <= -(n as i64)) {
            return bad(format!("delta_min = {lo} must exceed -n = -{n}"));
        }
    }
    for &n in &g.n {
        if g.deltas(n).is_empty() {
            return bad(format!("delta grid for n = {n} is empty"));
        }
    }
    if matches!(plan.command, Command::Avgcase | Command::NonconvexScan) {
        if g.d_theta.is_empty() {
            return bad("d_theta grid is empty".into());
        }
        if g.d_theta.contains(&0) {
            return bad("d_theta values must be positive".into());
        }
    }
    let i = &plan.instance;
    if let Some(eta) = i.eta {
        positive("eta", eta)?;
    }
    positive("k_out_scale", i.k_out_scale)?;
    if [i.d_z, i.d_x, i.d_theta, i.d_omega, i.max_dim].contains(&0) {
        return bad("dimensions must be positive".into());
    }
    if i.d_x > i.d_z {
        return bad(format!("d_x = {} exceeds d_z = {}", i.d_x, i.d_z));
    }
    if i.generator == Generator::File && i.problem.is_none() {
        return bad("the file generator needs `problem`".into());
    }
    if let Some(p) = &i.problem {
        if !p.is_file() {
            return bad(format!("problem file {} not found", p.display()));
        }
    }
    let m = &plan.meta;
    positive("lambda", m.lambda)?;
    if m.tasks == 0 || m.dim == 0 || m.samples == 0 || m.val_samples == 0 {
        return bad("meta sizes must be positive".into());
    }
    if let Some(p) = &m.manifest {
        if !p.is_file() {
            return bad(format!("task manifest {} not found", p.display()));
        }
    }
    if let Some(s) = plan.descent.step_size {
        positive("step_size", s)?;
    }
    positive("tol", plan.descent.tol)?;
    if plan.descent.max_steps == 0 {
        return bad("max_steps must be positive".into());
    }
    Ok(())
}

/// Creates the output directory and checks that it accepts files.
pub fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".i2o-write-probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| CliError::Config(format!("{} is not writable: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_text(command: Command, text: &str) -> Result<Plan> {
        let raw = RawConfig::parse(text, Path::new("test.toml"))?;
        resolve(command, &raw, &Overrides::default())
    }

    #[test]
    fn defaults_reproduce_the_reference_setups() {
        let p = resolve_text(Command::Sweep, "").unwrap();
        assert_eq!(p.grid.deltas(20).len(), 221);
        assert_eq!(p.grid.deltas(20)[0], DeltaN::Steps(-19));
        let a = resolve_text(Command::Avgcase, "").unwrap();
        assert_eq!(a.grid.d_theta, vec![2, 5, 10, 15, 20]);
        assert_eq!(a.seeds.len(), 20);
    }

    #[test]
    fn flags_win_over_file() {
        let raw = RawConfig::parse("seeds = [1, 2]\nout = \"a\"", Path::new("t")).unwrap();
        let flags = Overrides {
            seed: Some(9),
            out: Some("b".into()),
            ..Overrides::default()
        };
        let p = resolve(Command::Sweep, &raw, &flags).unwrap();
        assert_eq!(p.seeds, vec![9]);
        assert_eq!(p.out, PathBuf::from("b"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "seeds = []",
            "seeds = [1, 1]",
            "bogus = 1",
            "[grid]\nn = []",
            "[grid]\nn = [3]\ndelta_min = -3",
            "[instance]\neta = -1.0",
            "[instance]\nd_x = 6\nd_z = 5",
            "[train]\nmethod = \"newton\"",
            "command = \"avgcase\"",
        ] {
            assert!(
                matches!(resolve_text(Command::Sweep, text), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn geometric_grid_respects_bounds() {
        let p = resolve_text(
            Command::Sweep,
            "[grid]\nspacing = \"geometric\"\ndelta_max = 10\ninfinite = false",
        )
        .unwrap();
        let g = p.grid.deltas(3);
        assert_eq!(g.first(), Some(&DeltaN::Steps(-2)));
        assert_eq!(g.last(), Some(&DeltaN::Steps(10)));
    }
}

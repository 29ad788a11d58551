use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use i2o::config::{self, Command, Overrides, RawConfig};
use i2o::{plot, run, CliError};

#[derive(Parser)]
#[command(
    name = "i2o",
    version,
    about = "Closed-form experiments on affine implicit models"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a problem fixture against the inner-problem assumptions.
    Validate(Common),
    /// Loss after N + ΔN iterations for models trained at N.
    Sweep(Common),
    /// Gap against its lower bound on random valid instances.
    LowerboundScan(Common),
    /// Monte Carlo of the bound against the average-case right-hand side.
    Avgcase(Common),
    /// Bound magnitudes on rank-deficient gradient instances.
    NonconvexScan(Common),
    /// Implicit differentiation against unrolled training.
    IftVsUnroll(Common),
    /// Gap sweep on linear implicit meta-learning.
    ImamlDemo(Common),
    /// Render a sweep or avgcase CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run seeds 0..K.
    #[arg(long, value_name = "K")]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inner step size.
    #[arg(long)]
    eta: Option<f64>,
    /// closed_form, unrolled_gd or ift_gd.
    #[arg(long)]
    trainer: Option<String>,
    /// Training horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Problem fixture.
    #[arg(long)]
    problem: Option<PathBuf>,
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let (command, common) = match cli.command {
        Cmd::Plot { csv, out } => {
            let schema = plot::plot_csv(&csv, &out)?;
            return Ok(format!("wrote {} ({schema:?} chart)", out.display()));
        }
        Cmd::Validate(c) => (Command::Validate, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::LowerboundScan(c) => (Command::LowerboundScan, c),
        Cmd::Avgcase(c) => (Command::Avgcase, c),
        Cmd::NonconvexScan(c) => (Command::NonconvexScan, c),
        Cmd::IftVsUnroll(c) => (Command::IftVsUnroll, c),
        Cmd::ImamlDemo(c) => (Command::ImamlDemo, c),
    };
    let raw = match &common.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    let flags = Overrides {
        seed: common.seed,
        seed_count: common.seeds,
        out: common.out,
        eta: common.eta,
        trainer: common.trainer,
        n: common.n,
        problem: common.problem,
    };
    let plan = config::resolve(command, &raw, &flags)?;
    let threads = run::threads_from_env()?;
    let outcome = run::run(&plan, threads)?;
    let mut msg = outcome.summary;
    for f in &outcome.files {
        msg.push_str(&format!("\nwrote {}", f.display()));
    }
    Ok(msg)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

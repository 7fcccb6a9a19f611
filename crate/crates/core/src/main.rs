use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ensemble_oc::config::RunConfig;
use ensemble_oc::experiment::{self, Status};
use ensemble_oc::Error;

/// Ensemble optimal control: simulate, optimize and check finite ensembles of
/// affine-control systems.
#[derive(Parser)]
#[command(name = "ensemble-oc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write every RK4 substep instead of interval nodes only.
    #[arg(long, global = true)]
    full_grid: bool,
    /// Disable the covector correction of the maximum-principle sweep.
    #[arg(long, global = true)]
    no_correction: bool,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Seed of the empirical measure, overriding `[measure] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Grad,
    Pmp,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the ensemble under the configured control.
    Simulate,
    /// Minimize the ensemble cost and validate on fresh parameters.
    Optimize,
    /// Exact discrete optimum for linear members.
    Oracle,
    /// Distance of minimizers to the largest-ensemble minimizer.
    SweepN,
    /// Adjoint gradient against finite differences.
    CheckGrad,
    /// Maximum-condition residual.
    Residual,
    /// Full diagnostic suite.
    Check,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::ConfigLine { .. } | Error::Argument(_) | Error::Dimension(_) => EXIT_VALIDATION,
        e if e.is_divergence() => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    if cli.full_grid {
        cfg.output.full_grid = true;
    }
    if cli.no_correction {
        cfg.optimize.correction = false;
    }
    if let Some(m) = cli.method {
        cfg.optimize.method = match m {
            MethodArg::Grad => "grad",
            MethodArg::Pmp => "pmp",
        }
        .into();
    }
    if let Some(seed) = cli.seed {
        cfg.measure.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Simulate => {
            let r = experiment::simulate(&cfg)?;
            println!("integrated {} members, cost {}", r.trajectory.members(), r.cost.total);
        }
        Command::Optimize => {
            let r = experiment::optimize(&cfg)?;
            let t = &r.trace;
            println!(
                "{}: cost {} -> {} ({} of {} steps accepted)",
                t.method,
                t.initial.total,
                t.report.total,
                t.accepted_count(),
                t.records.len()
            );
            println!(
                "mean terminal error: train {} test {}",
                r.validation.train_mean, r.validation.test_mean
            );
        }
        Command::Oracle => {
            let s = experiment::oracle(&cfg)?;
            println!("cost_opt {} gram_condition {:e}", s.cost_opt, s.gram_condition);
            if s.is_ill_conditioned() {
                eprintln!("warning: normal equations are ill-conditioned");
            }
        }
        Command::SweepN => {
            for r in experiment::sweep_n(&cfg)? {
                println!("N={} err={} cost={}", r.n, r.err, r.cost);
            }
        }
        Command::CheckGrad => {
            let c = experiment::check_grad(&cfg)?;
            println!("relative error {:e} (tolerance {:e})", c.rel_error, c.tolerance);
            if !c.passed() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Residual => {
            let r = experiment::residual(&cfg)?;
            println!("residual {:e}", r.residual);
        }
        Command::Check => {
            let rows = experiment::check(&cfg)?;
            for r in &rows {
                println!("{:<12} {:<5} {}", r.name, r.status, r.detail);
            }
            if rows.iter().any(|r| r.status == Status::Fail) {
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

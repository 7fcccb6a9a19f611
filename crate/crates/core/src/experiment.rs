//! Experiment drivers behind the command-line subcommands.
//!
//! Each driver writes CSV files under the configured output directory. Every
//! file starts with the resolved-config comment line, and `resolved.toml`
//! holds the same config in a form that can be passed back to `--config`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::control::{PiecewiseControl, TimeGrid};
use crate::error::{Error, Result};
use crate::gradient::{assemble_gradient, fd_gradient, relative_l2_error};
use crate::integrator::{integrate_adjoint, integrate_forward, TrajectoryBundle};
use crate::lq::{kalman_rank, solve_lq, LqSolution};
use crate::measure::{Beta44Law, DiscreteMeasure};
use crate::objective::{endpoint_cost_of, CostReport};
use crate::optim::{self, pmp_residual, RunTrace};
use crate::problem::EnsembleProblem;

/// Relative gradient error allowed for linear members.
pub const GRAD_TOL_LINEAR: f64 = 1e-4;
/// Relative gradient error allowed for nonlinear members.
pub const GRAD_TOL_NONLINEAR: f64 = 5e-4;
/// Largest acceptable normalized maximum-condition violation.
pub const RESIDUAL_TOL: f64 = 1e-3;
/// Optimizer cost may exceed the exact discrete optimum by this factor.
pub const ORACLE_FACTOR: f64 = 1.01;
const FD_EPS: f64 = 1e-6;

/// Output directory bound to one resolved config.
pub struct OutputDir {
    dir: PathBuf,
    header: String,
}

impl OutputDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = PathBuf::from(&cfg.output.dir);
        fs::create_dir_all(&dir)?;
        let out = Self { dir, header: cfg.header_line() };
        out.write("resolved.toml", &cfg.to_toml())?;
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Write `body` to `name` (relative, may contain a subdirectory) after
    /// the config line.
    pub fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, format!("{}\n{body}", self.header))?;
        Ok(path)
    }
}

fn is_linear_quadratic(problem: &dyn EnsembleProblem, measure: &DiscreteMeasure) -> bool {
    (0..measure.len()).all(|j| {
        let th = measure.theta(j);
        problem.linear_form(th).is_some() && problem.quadratic_target(th).is_some()
    })
}

/// `|x_j(1) - y(θ_j)|` for every member, or `sqrt(a)` when the cost is not
/// a plain squared distance.
pub fn terminal_errors(problem: &dyn EnsembleProblem, traj: &TrajectoryBundle) -> Vec<f64> {
    (0..traj.members())
        .map(|j| {
            let (x, th) = (traj.terminal(j), traj.theta(j));
            match problem.quadratic_target(th) {
                Some(y) => x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                None => problem.terminal_cost(x, th).max(0.0).sqrt(),
            }
        })
        .collect()
}

fn weighted_mean(measure: &DiscreteMeasure, values: &[f64]) -> f64 {
    values.iter().enumerate().map(|(j, v)| measure.weight(j) * v).sum()
}

/// Control with entries drawn uniformly from `[-1, 1]`.
pub fn random_control(grid: TimeGrid, dim: usize, seed: u64) -> PiecewiseControl {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.intervals() * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    PiecewiseControl::from_values(grid, dim, values).expect("shape is consistent")
}

pub struct SimulateReport {
    pub trajectory: TrajectoryBundle,
    pub cost: CostReport,
}

/// Integrate the configured measure under the configured control.
pub fn simulate(cfg: &RunConfig) -> Result<SimulateReport> {
    let problem = cfg.problem()?;
    let measure = cfg.measure()?;
    let u = cfg.initial_control()?;
    let out = OutputDir::create(cfg)?;
    let traj = integrate_forward(problem.as_ref(), &measure, &u)?;
    let cost = endpoint_cost_of(problem.as_ref(), &measure, &u, cfg.optimize.beta, &traj);
    let width = measure.len().to_string().len().max(3);
    for j in 0..measure.len() {
        out.write(&format!("trajectories/member_{j:0width$}.csv"), &traj.member_csv(j, "x", cfg.output.full_grid))?;
    }
    out.write("control.csv", &u.to_csv())?;
    out.write("cost.csv", &cost.to_csv())?;
    Ok(SimulateReport { trajectory: traj, cost })
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub train_errors: Vec<f64>,
    pub test_measure: DiscreteMeasure,
    pub test_errors: Vec<f64>,
    pub train_mean: f64,
    pub test_mean: f64,
}

pub struct OptimizeReport {
    pub trace: RunTrace,
    pub validation: Validation,
}

/// Run the configured optimizer and test the result on a fresh sample.
pub fn optimize(cfg: &RunConfig) -> Result<OptimizeReport> {
    let problem = cfg.problem()?;
    let measure = cfg.measure()?;
    let test = cfg.validation_measure()?;
    let u0 = cfg.initial_control()?;
    let out = OutputDir::create(cfg)?;
    let trace = optim::run(cfg.method()?, problem.as_ref(), &measure, &u0, cfg.optimize.beta, &cfg.optimizer())?;
    let traj = integrate_forward(problem.as_ref(), &measure, &trace.control)?;
    let test_traj = integrate_forward(problem.as_ref(), &test, &trace.control)?;
    let train_errors = terminal_errors(problem.as_ref(), &traj);
    let test_errors = terminal_errors(problem.as_ref(), &test_traj);
    let validation = Validation {
        train_mean: weighted_mean(&measure, &train_errors),
        test_mean: weighted_mean(&test, &test_errors),
        train_errors,
        test_errors,
        test_measure: test,
    };

    let full = cfg.output.full_grid;
    out.write("trace.csv", &trace.to_csv())?;
    out.write("control.csv", &trace.control.to_csv())?;
    out.write("trajectories.csv", &traj.to_csv("x", full))?;
    out.write("validation_trajectories.csv", &test_traj.to_csv("x", full))?;
    let mut rows = String::from("set,j,theta,terminal_error\n");
    for (set, m, errs) in [("train", &measure, &validation.train_errors), ("test", &validation.test_measure, &validation.test_errors)] {
        for (j, e) in errs.iter().enumerate() {
            rows.push_str(&format!("{set},{j},{},{e}\n", m.theta(j)[0]));
        }
    }
    out.write("validation.csv", &rows)?;
    let r = &trace.report;
    out.write(
        "summary.csv",
        &format!(
            "method,cost,integral,reg,iterations,accepted,converged,final_grad_norm,train_mean_error,test_mean_error\n\
             {},{},{},{},{},{},{},{},{},{}\n",
            trace.method,
            r.total,
            r.integral_term,
            r.reg_term,
            trace.records.len(),
            trace.accepted_count(),
            trace.converged,
            trace.final_grad_norm,
            validation.train_mean,
            validation.test_mean
        ),
    )?;
    Ok(OptimizeReport { trace, validation })
}

/// Exact discrete optimum for linear members.
pub fn oracle(cfg: &RunConfig) -> Result<LqSolution> {
    let problem = cfg.problem()?;
    let measure = cfg.measure()?;
    let out = OutputDir::create(cfg)?;
    let sol = solve_lq(problem.as_ref(), &measure, cfg.grid()?, cfg.optimize.beta)?;
    out.write("oracle_control.csv", &sol.u_opt.to_csv())?;
    out.write(
        "oracle.csv",
        &format!(
            "cost_opt,gram_condition,residual,ill_conditioned\n{},{},{},{}\n",
            sol.cost_opt,
            sol.gram_condition,
            sol.residual,
            sol.is_ill_conditioned()
        ),
    )?;
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    /// `‖û_N - û_ref‖_{L²}`, the median over seeds for empirical measures.
    pub err: f64,
    pub cost: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Minimizers for growing ensembles, compared with the largest one.
pub fn sweep_n(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let problem = cfg.problem()?;
    let u0 = cfg.initial_control()?;
    let method = cfg.method()?;
    let opt = cfg.optimizer();
    let beta = cfg.optimize.beta;
    let sweep = &cfg.sweep;
    let reference = sweep.reference_n.unwrap_or_else(|| *sweep.n_list.iter().max().expect("validated"));
    let seeds: Vec<Option<u64>> = match cfg.measure.kind.as_str() {
        "quantile" => vec![None],
        "empirical" => sweep.seeds.iter().copied().map(Some).collect(),
        other => return Err(Error::arg(format!("sweep-n needs quantile or empirical measures, not {other}"))),
    };
    let build = |n: usize, seed: Option<u64>| match seed {
        Some(s) => Beta44Law.sample_empirical(n, s),
        None => Beta44Law.quantile_quadrature(n),
    };
    let solve = |n: usize, seed: Option<u64>| -> Result<RunTrace> {
        optim::run(method, problem.as_ref(), &build(n, seed)?, &u0, beta, &opt)
    };
    let out = OutputDir::create(cfg)?;
    let mut runs = Vec::new();
    for &seed in &seeds {
        let reference_run = solve(reference, seed)?;
        for &n in &sweep.n_list {
            let trace = if n == reference { reference_run.clone() } else { solve(n, seed)? };
            let err = PiecewiseControl::axpy(-1.0, &reference_run.control, &trace.control)?.norm_l2();
            runs.push((n, seed, err, trace.report.total));
        }
    }
    let rows: Vec<SweepRow> = sweep
        .n_list
        .iter()
        .map(|&n| {
            let of_n: Vec<_> = runs.iter().filter(|r| r.0 == n).collect();
            SweepRow {
                n,
                err: median(of_n.iter().map(|r| r.2).collect()),
                cost: median(of_n.iter().map(|r| r.3).collect()),
            }
        })
        .collect();
    let mut body = String::from("N,err,cost\n");
    for r in &rows {
        body.push_str(&format!("{},{},{}\n", r.n, r.err, r.cost));
    }
    out.write("sweep.csv", &body)?;
    if seeds.iter().any(Option::is_some) {
        let mut body = String::from("N,seed,err,cost\n");
        for (n, seed, err, cost) in &runs {
            body.push_str(&format!("{n},{},{err},{cost}\n", seed.unwrap_or_default()));
        }
        out.write("sweep_runs.csv", &body)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

fn gradient_check(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
) -> Result<(GradCheck, PiecewiseControl, PiecewiseControl)> {
    let traj = integrate_forward(problem, measure, u)?;
    let adj = integrate_adjoint(problem, measure, u, &traj)?;
    let g = assemble_gradient(problem, measure, u, beta, &traj, &adj)?.delta_u;
    let fd = fd_gradient(problem, measure, u, beta, FD_EPS)?;
    let linear = (0..measure.len()).all(|j| problem.linear_form(measure.theta(j)).is_some());
    let tolerance = if linear { GRAD_TOL_LINEAR } else { GRAD_TOL_NONLINEAR };
    Ok((GradCheck { rel_error: relative_l2_error(&g, &fd)?, tolerance }, g, fd))
}

/// Adjoint gradient against central differences at a seeded random control.
pub fn check_grad(cfg: &RunConfig) -> Result<GradCheck> {
    let problem = cfg.problem()?;
    let measure = cfg.measure()?;
    let out = OutputDir::create(cfg)?;
    let u = random_control(cfg.grid()?, problem.control_dim(), cfg.measure.seed);
    let (check, g, fd) = gradient_check(problem.as_ref(), &measure, &u, cfg.optimize.beta)?;
    let mut body = String::from("l,i,adjoint,fd\n");
    for l in 0..u.grid().intervals() {
        for i in 0..u.dim() {
            body.push_str(&format!("{l},{i},{},{}\n", g.row(l)[i], fd.row(l)[i]));
        }
    }
    out.write("gradient_compare.csv", &body)?;
    out.write(
        "check_grad.csv",
        &format!("rel_error,tolerance,pass\n{},{},{}\n", check.rel_error, check.tolerance, check.passed()),
    )?;
    Ok(check)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub residual: f64,
    /// `None` when the control came from `[control]`, else whether the run
    /// met `grad_tol`.
    pub converged: Option<bool>,
}

/// Maximum-condition residual of the `[control] file` control, or of the
/// configured optimizer's result when no file is given.
pub fn residual(cfg: &RunConfig) -> Result<ResidualReport> {
    let problem = cfg.problem()?;
    let measure = cfg.measure()?;
    let u0 = cfg.initial_control()?;
    let out = OutputDir::create(cfg)?;
    let beta = cfg.optimize.beta;
    let (u, converged) = if cfg.control.file.is_some() {
        (u0, None)
    } else {
        let trace = optim::run(cfg.method()?, problem.as_ref(), &measure, &u0, beta, &cfg.optimizer())?;
        out.write("control.csv", &trace.control.to_csv())?;
        (trace.control, Some(trace.converged))
    };
    let residual = pmp_residual(problem.as_ref(), &measure, &u, beta)?;
    let conv = converged.map_or("n/a".to_string(), |c| c.to_string());
    out.write("residual.csv", &format!("residual,converged\n{residual},{conv}\n"))?;
    Ok(ResidualReport { residual, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Info => "info",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

fn row(name: &'static str, ok: bool, detail: String) -> CheckRow {
    CheckRow { name, status: if ok { Status::Pass } else { Status::Fail }, detail }
}

/// Diagnostic suite for the configured problem.
pub fn check(cfg: &RunConfig) -> Result<Vec<CheckRow>> {
    let problem = cfg.problem()?;
    let p = problem.as_ref();
    let measure = cfg.measure()?;
    let grid = cfg.grid()?;
    let beta = cfg.optimize.beta;
    let out = OutputDir::create(cfg)?;
    let mut rows = Vec::new();

    let u = random_control(grid, p.control_dim(), cfg.measure.seed);
    let (g, _, _) = gradient_check(p, &measure, &u, beta)?;
    rows.push(row("gradient", g.passed(), format!("relative error {:e} (tolerance {:e})", g.rel_error, g.tolerance)));

    let a = integrate_forward(p, &measure, &u)?;
    let b = integrate_forward(p, &measure, &u)?;
    let same = a.raw().iter().zip(b.raw()).all(|(x, y)| x.to_bits() == y.to_bits());
    rows.push(row("determinism", same, "repeated integration is bitwise identical".into()));

    let trace = optim::run(cfg.method()?, p, &measure, &cfg.initial_control()?, beta, &cfg.optimizer())?;
    let monotone = trace.accepted_costs().windows(2).all(|w| w[1] <= w[0]);
    rows.push(row(
        "monotone",
        monotone,
        format!("{} accepted of {} iterations, final cost {}", trace.accepted_count(), trace.records.len(), trace.report.total),
    ));

    if is_linear_quadratic(p, &measure) {
        let sol = solve_lq(p, &measure, grid, beta)?;
        let ratio = trace.report.total / sol.cost_opt;
        rows.push(row(
            "oracle",
            ratio <= ORACLE_FACTOR,
            format!("{} cost / optimum = {ratio} (limit {ORACLE_FACTOR})", trace.method),
        ));
        let r = pmp_residual(p, &measure, &sol.u_opt, beta)?;
        rows.push(row("residual", r <= RESIDUAL_TOL, format!("residual at the exact optimum {r:e}")));
        let rank = kalman_rank(p, &measure)?;
        let full = p.state_dim() * measure.len();
        rows.push(CheckRow {
            name: "kalman",
            status: Status::Info,
            detail: if rank == full {
                format!("rank {rank} of {full}, stacked system controllable")
            } else {
                format!("rank {rank} of {full}, stacked system rank deficient")
            },
        });
    } else {
        let r = pmp_residual(p, &measure, &trace.control, beta)?;
        rows.push(CheckRow {
            name: "residual",
            status: Status::Info,
            detail: format!("residual at the optimizer result {r:e} (no exact optimum for nonlinear members)"),
        });
    }

    let mut body = String::from("check,status,detail\n");
    for r in &rows {
        body.push_str(&format!("{},{},\"{}\"\n", r.name, r.status, r.detail));
    }
    out.write("check.csv", &body)?;
    Ok(rows)
}

//! Projected gradient descent and the iterative maximum principle on `U_M`.
//!
//! Both drivers follow the same skeleton: the adjoint is recomputed only
//! after an accepted step, a candidate control is evaluated, and the step
//! size shrinks by `τ` whenever the candidate is rejected.

use std::fmt;
use std::str::FromStr;

use crate::control::PiecewiseControl;
use crate::error::{Error, Result};
use crate::gradient::{assemble_gradient, GradientReport};
use crate::integrator::{
    advance_interval, integrate_adjoint, integrate_forward, AdjointBundle, TrajectoryBundle, Workspace,
};
use crate::measure::DiscreteMeasure;
use crate::objective::{endpoint_cost_of, CostReport};
use crate::par;
use crate::problem::EnsembleProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Projected gradient field with Armijo backtracking.
    Gradient,
    /// Iterative maximum principle with a forward sweep.
    Pmp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Gradient => "grad",
            Method::Pmp => "pmp",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Method::Gradient),
            "pmp" => Ok(Method::Pmp),
            other => Err(Error::arg(format!("unknown method `{other}` (expected grad or pmp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub gamma0: f64,
    pub tau: f64,
    /// Armijo constant; ignored by the maximum-principle sweep.
    pub c: f64,
    pub max_iter: usize,
    /// Stop once `‖Δu‖ ≤ grad_tol`; zero disables the test.
    pub grad_tol: f64,
    /// Apply the covector correction during the sweep.
    pub correction: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { gamma0: 1.0, tau: 0.5, c: 1e-4, max_iter: 500, grad_tol: 0.0, correction: true }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::arg(format!("gamma0 must be positive, got {}", self.gamma0)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::arg(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::arg(format!("c must lie in (0, 1), got {}", self.c)));
        }
        if !(self.grad_tol >= 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::arg(format!("grad_tol must be non-negative, got {}", self.grad_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cost of the candidate control tried at this iteration.
    pub cost: f64,
    pub integral: f64,
    pub reg: f64,
    /// Step size used for the candidate.
    pub gamma: f64,
    pub accepted: bool,
    /// `‖Δu‖` at the iterate the step was taken from.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub method: Method,
    pub config: OptimizerConfig,
    pub initial: CostReport,
    pub initial_grad_norm: f64,
    pub records: Vec<IterationRecord>,
    pub control: PiecewiseControl,
    pub report: CostReport,
    pub final_grad_norm: f64,
    /// True when the run stopped on `grad_tol`.
    pub converged: bool,
}

impl RunTrace {
    /// Initial cost followed by the cost of every accepted step.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial.total)
            .chain(self.records.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }

    pub fn accepted_count(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    /// Row 0 is the starting point; later rows are one per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,cost,integral,reg,gamma,accepted,grad_norm\n");
        let i = &self.initial;
        out.push_str(&format!(
            "0,{},{},{},{},1,{}\n",
            i.total, i.integral_term, i.reg_term, self.config.gamma0, self.initial_grad_norm
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iter, r.cost, r.integral, r.reg, r.gamma, r.accepted as u8, r.grad_norm
            ));
        }
        out
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

struct Iterate {
    u: PiecewiseControl,
    traj: TrajectoryBundle,
    report: CostReport,
    adj: AdjointBundle,
    grad: GradientReport,
}

impl Iterate {
    fn new(
        problem: &dyn EnsembleProblem,
        measure: &DiscreteMeasure,
        u: PiecewiseControl,
        traj: TrajectoryBundle,
        report: CostReport,
        beta: f64,
    ) -> Result<Self> {
        let adj = integrate_adjoint(problem, measure, &u, &traj)?;
        let grad = assemble_gradient(problem, measure, &u, beta, &traj, &adj)?;
        Ok(Self { u, traj, report, adj, grad })
    }

    fn start(
        problem: &dyn EnsembleProblem,
        measure: &DiscreteMeasure,
        u0: &PiecewiseControl,
        beta: f64,
    ) -> Result<Self> {
        let traj = integrate_forward(problem, measure, u0)?;
        let report = endpoint_cost_of(problem, measure, u0, beta, &traj);
        Self::new(problem, measure, u0.clone(), traj, report, beta)
    }
}

fn drive<F>(
    method: Method,
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u0: &PiecewiseControl,
    beta: f64,
    cfg: &OptimizerConfig,
    mut candidate: F,
) -> Result<RunTrace>
where
    F: FnMut(&Iterate, f64) -> Result<(PiecewiseControl, TrajectoryBundle)>,
{
    cfg.validate()?;
    check_beta(beta)?;
    let mut it = Iterate::start(problem, measure, u0, beta).map_err(|e| e.at_iteration(0))?;
    let initial = it.report.clone();
    let initial_grad_norm = it.grad.norm;
    let mut gamma = cfg.gamma0;
    let mut records = Vec::new();
    let mut converged = it.grad.norm <= cfg.grad_tol;
    for r in 1..=cfg.max_iter {
        if converged {
            break;
        }
        let (u_new, traj_new) = candidate(&it, gamma).map_err(|e| e.at_iteration(r))?;
        let rep = endpoint_cost_of(problem, measure, &u_new, beta, &traj_new);
        let accepted = match method {
            Method::Gradient => it.report.total >= rep.total + cfg.c * gamma * it.grad.norm * it.grad.norm,
            Method::Pmp => it.report.total > rep.total,
        };
        records.push(IterationRecord {
            iter: r,
            cost: rep.total,
            integral: rep.integral_term,
            reg: rep.reg_term,
            gamma,
            accepted,
            grad_norm: it.grad.norm,
        });
        if accepted {
            it = Iterate::new(problem, measure, u_new, traj_new, rep, beta).map_err(|e| e.at_iteration(r))?;
            converged = it.grad.norm <= cfg.grad_tol;
        } else {
            gamma *= cfg.tau;
        }
    }
    Ok(RunTrace {
        method,
        config: *cfg,
        initial,
        initial_grad_norm,
        records,
        final_grad_norm: it.grad.norm,
        control: it.u,
        report: it.report,
        converged,
    })
}

/// Projected gradient field with Armijo backtracking.
pub fn run_projected_gradient(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u0: &PiecewiseControl,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<RunTrace> {
    drive(Method::Gradient, problem, measure, u0, beta, cfg, |it, gamma| {
        let u_new = PiecewiseControl::axpy(-gamma, &it.grad.delta_u, &it.u)?;
        let traj = integrate_forward(problem, measure, &u_new)?;
        Ok((u_new, traj))
    })
}

/// Iterative maximum principle: controls and states are updated together in
/// one forward sweep over the intervals.
pub fn run_iterative_pmp(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u0: &PiecewiseControl,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<RunTrace> {
    drive(Method::Pmp, problem, measure, u0, beta, cfg, |it, gamma| {
        pmp_sweep(problem, measure, &it.u, &it.traj, &it.adj, beta, gamma, cfg.correction)
    })
}

/// Run the selected method.
pub fn run(
    method: Method,
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u0: &PiecewiseControl,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<RunTrace> {
    match method {
        Method::Gradient => run_projected_gradient(problem, measure, u0, beta, cfg),
        Method::Pmp => run_iterative_pmp(problem, measure, u0, beta, cfg),
    }
}

struct SweepMember {
    series: Vec<f64>,
    lam: Vec<f64>,
    ws: Workspace,
    fields: Vec<f64>,
    /// `(λ^corr F(x^new))ᵀ` at the current node.
    switching: Vec<f64>,
    grad_old: Vec<f64>,
    grad_new: Vec<f64>,
    status: Result<()>,
}

#[allow(clippy::too_many_arguments)]
fn pmp_sweep(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    traj: &TrajectoryBundle,
    adj: &AdjointBundle,
    beta: f64,
    gamma: f64,
    correction: bool,
) -> Result<(PiecewiseControl, TrajectoryBundle)> {
    let grid = u.grid();
    let (n, k) = (problem.state_dim(), problem.control_dim());
    let stride = grid.node_count() * n;
    let mut members: Vec<SweepMember> = (0..measure.len())
        .map(|j| {
            let mut series = vec![0.0; stride];
            series[..n].copy_from_slice(traj.at_node(j, 0));
            SweepMember {
                series,
                lam: adj.at_node(j, 0).to_vec(),
                ws: Workspace::for_member(problem, measure.theta(j), grid.dt()),
                fields: vec![0.0; n * k],
                switching: vec![0.0; k],
                grad_old: vec![0.0; n],
                grad_new: vec![0.0; n],
                status: Ok(()),
            }
        })
        .collect();
    let mut u_new = u.clone();
    let shrink = 1.0 / (1.0 + gamma * beta);
    let mut row = vec![0.0; k];
    for l in 0..grid.intervals() {
        let node = grid.interval_node(l);
        par::for_each_mut(&mut members, |j, m| {
            problem.control_fields(&m.series[node * n..(node + 1) * n], measure.theta(j), &mut m.fields);
            for i in 0..k {
                m.switching[i] = (0..n).map(|r| m.lam[r] * m.fields[r * k + i]).sum();
            }
        });
        let mut switching = vec![0.0; k];
        for (j, m) in members.iter().enumerate() {
            let alpha = measure.weight(j);
            switching.iter_mut().zip(&m.switching).for_each(|(s, v)| *s += alpha * v);
        }
        for i in 0..k {
            row[i] = shrink * (u.row(l)[i] - gamma * switching[i]);
        }
        u_new.row_mut(l).copy_from_slice(&row);
        let next = grid.interval_node(l + 1);
        par::for_each_mut(&mut members, |j, m| {
            let theta = measure.theta(j);
            m.status = advance_interval(problem, theta, &row, grid, l, j, &mut m.series, &mut m.ws);
            if m.status.is_err() {
                return;
            }
            m.lam.copy_from_slice(adj.at_node(j, l + 1));
            if correction {
                let alpha = measure.weight(j);
                problem.terminal_cost_grad(traj.at_node(j, l + 1), theta, &mut m.grad_old);
                problem.terminal_cost_grad(&m.series[next * n..(next + 1) * n], theta, &mut m.grad_new);
                for r in 0..n {
                    m.lam[r] += alpha * (m.grad_new[r] - m.grad_old[r]);
                }
            }
        });
        for m in members.iter_mut() {
            std::mem::replace(&mut m.status, Ok(()))?;
        }
    }
    let states = members.into_iter().flat_map(|m| m.series).collect();
    Ok((u_new, TrajectoryBundle::from_parts(grid, n, measure, states)))
}

/// Normalized violation of the maximum condition,
/// `max_l |u_l + (1/β) Ḡ_l| / max(1, ‖u‖)`, where `Ḡ_l` is the interval
/// average of `Σ_j α_j (λ_j F(x_j))ᵀ`.
pub fn pmp_residual(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let traj = integrate_forward(problem, measure, u)?;
    let adj = integrate_adjoint(problem, measure, u, &traj)?;
    let grad = assemble_gradient(problem, measure, u, beta, &traj, &adj)?;
    let worst = (0..u.grid().intervals())
        .map(|l| grad.delta_u.row(l).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(worst / beta / u.norm_l2().max(1.0))
}

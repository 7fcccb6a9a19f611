//! Ensemble cost functionals.
//!
//! The end-point form is `Σ α_j a(x_j(1), θ_j) + (β/2)‖u‖²`; the running
//! form replaces the terminal evaluation by a discrete time measure `ν` on
//! substep nodes. Member terms are reduced in index order.

use crate::control::PiecewiseControl;
use crate::error::{Error, Result};
use crate::integrator::{integrate_forward, TrajectoryBundle};
use crate::measure::DiscreteMeasure;
use crate::problem::EnsembleProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total: f64,
    pub integral_term: f64,
    pub reg_term: f64,
    /// Weighted contribution of each member.
    pub per_member: Vec<f64>,
}

impl CostReport {
    fn assemble(per_member: Vec<f64>, reg_term: f64) -> Self {
        let integral_term: f64 = per_member.iter().sum();
        Self { total: integral_term + reg_term, integral_term, reg_term, per_member }
    }

    /// One row `total,integral,reg` with header.
    pub fn to_csv(&self) -> String {
        format!("total,integral,reg\n{},{},{}\n", self.total, self.integral_term, self.reg_term)
    }

    pub fn per_member_csv(&self) -> String {
        let mut out = String::from("j,contribution\n");
        for (j, c) in self.per_member.iter().enumerate() {
            out.push_str(&format!("{j},{c}\n"));
        }
        out
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::arg(format!("beta must be a finite non-negative number, got {beta}")));
    }
    Ok(())
}

/// `(β/2)‖u‖²_{L²}`.
pub fn regularization(u: &PiecewiseControl, beta: f64) -> f64 {
    0.5 * beta * u.norm_l2_sq()
}

/// End-point cost of an already integrated bundle.
pub fn endpoint_cost_of(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
    traj: &TrajectoryBundle,
) -> CostReport {
    let per_member = (0..measure.len())
        .map(|j| measure.weight(j) * problem.terminal_cost(traj.terminal(j), measure.theta(j)))
        .collect();
    CostReport::assemble(per_member, regularization(u, beta))
}

/// `F^N(u) = Σ α_j a(x_j(1), θ_j) + (β/2)‖u‖²`.
pub fn endpoint_cost(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
) -> Result<CostReport> {
    check_beta(beta)?;
    let traj = integrate_forward(problem, measure, u)?;
    Ok(endpoint_cost_of(problem, measure, u, beta, &traj))
}

/// Time-integrated cost `Σ_j α_j Σ_q w_q a(t_q, x_j(t_q), θ_j) + (β/2)‖u‖²`.
///
/// Atoms of `time_measure` are snapped to the nearest substep node; an atom
/// further than half a substep from every node is rejected.
pub fn running_cost<A>(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
    time_measure: &DiscreteMeasure,
    a_running: A,
) -> Result<CostReport>
where
    A: Fn(f64, &[f64], &[f64]) -> f64,
{
    check_beta(beta)?;
    if time_measure.dim() != 1 {
        return Err(Error::arg("time measure must be one dimensional"));
    }
    let grid = u.grid();
    let steps = grid.total_steps() as f64;
    let tol = 0.5 * grid.dt();
    let nodes = (0..time_measure.len())
        .map(|q| {
            let t = time_measure.theta(q)[0];
            let m = (t * steps).round();
            if m < 0.0 || m > steps || (t - m / steps).abs() > tol * (1.0 + 1e-9) {
                return Err(Error::arg(format!("time atom {t} is not on the substep grid")));
            }
            Ok(m as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = integrate_forward(problem, measure, u)?;
    let per_member = (0..measure.len())
        .map(|j| {
            let theta = measure.theta(j);
            let inner: f64 = nodes
                .iter()
                .enumerate()
                .map(|(q, &m)| time_measure.weight(q) * a_running(grid.node_time(m), traj.at(j, m), theta))
                .sum();
            measure.weight(j) * inner
        })
        .collect();
    Ok(CostReport::assemble(per_member, regularization(u, beta)))
}

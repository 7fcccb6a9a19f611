//! Discretized gradient of the end-point cost on `U_M`.
//!
//! With `G_l = Σ_j α_j F(x_l^j)ᵀ λ_l^{jᵀ}` at interval nodes, the gradient on
//! interval `l` is the trapezoid mean `(G_{l-1} + G_l)/2 + β u_l`.

use crate::control::PiecewiseControl;
use crate::error::{Error, Result};
use crate::integrator::{AdjointBundle, TrajectoryBundle};
use crate::measure::DiscreteMeasure;
use crate::objective::endpoint_cost;
use crate::par;
use crate::problem::EnsembleProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub delta_u: PiecewiseControl,
    /// `‖Δu‖_{L²}`.
    pub norm: f64,
}

/// `Σ_j α_j F(x_l^j)ᵀ λ_l^{jᵀ}` at every interval node `l = 0..=M`,
/// row-major `(M + 1) x k`. Members are summed in index order.
pub fn weighted_switching(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    traj: &TrajectoryBundle,
    adj: &AdjointBundle,
) -> Result<Vec<f64>> {
    let grid = traj.grid();
    if adj.grid() != grid || traj.members() != measure.len() || adj.members() != measure.len() {
        return Err(Error::arg("trajectory and adjoint bundles are inconsistent with the measure"));
    }
    let (n, k) = (problem.state_dim(), problem.control_dim());
    let nodes = grid.intervals() + 1;
    let per_member = par::map_indexed(measure.len(), |j| {
        let theta = measure.theta(j);
        let mut fields = vec![0.0; n * k];
        let mut out = vec![0.0; nodes * k];
        for l in 0..nodes {
            problem.control_fields(traj.at_node(j, l), theta, &mut fields);
            let lam = adj.at_node(j, l);
            for i in 0..k {
                out[l * k + i] = (0..n).map(|r| fields[r * k + i] * lam[r]).sum();
            }
        }
        out
    });
    let mut total = vec![0.0; nodes * k];
    for (j, contrib) in per_member.iter().enumerate() {
        let alpha = measure.weight(j);
        total.iter_mut().zip(contrib).for_each(|(t, c)| *t += alpha * c);
    }
    Ok(total)
}

/// `Δu_l = (1/2) Σ_j α_j (F(x_{l-1}^j)ᵀ λ_{l-1}^{jᵀ} + F(x_l^j)ᵀ λ_l^{jᵀ}) + β u_l`.
pub fn assemble_gradient(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
    traj: &TrajectoryBundle,
    adj: &AdjointBundle,
) -> Result<GradientReport> {
    if traj.grid() != u.grid() {
        return Err(Error::arg("trajectory bundle was computed on a different grid"));
    }
    let switching = weighted_switching(problem, measure, traj, adj)?;
    let k = u.dim();
    let mut delta_u = u.clone();
    for l in 0..u.grid().intervals() {
        let row = delta_u.row_mut(l);
        for i in 0..k {
            row[i] = 0.5 * (switching[l * k + i] + switching[(l + 1) * k + i]) + beta * row[i];
        }
    }
    let norm = delta_u.norm_l2();
    Ok(GradientReport { delta_u, norm })
}

/// Central-difference gradient of the end-point cost, scaled by `M` so the
/// result is the `L²` Riesz representative on `U_M`.
pub fn fd_gradient(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    beta: f64,
    epsilon: f64,
) -> Result<PiecewiseControl> {
    if !(epsilon > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {epsilon}")));
    }
    let m = u.grid().intervals() as f64;
    let coords = u.values().len();
    let partials = par::map_indexed(coords, |c| -> Result<f64> {
        let mut up = u.clone();
        up.values_mut()[c] += epsilon;
        let mut down = u.clone();
        down.values_mut()[c] -= epsilon;
        let fp = endpoint_cost(problem, measure, &up, beta)?.total;
        let fm = endpoint_cost(problem, measure, &down, beta)?.total;
        Ok(m * (fp - fm) / (2.0 * epsilon))
    });
    let values = partials.into_iter().collect::<Result<Vec<_>>>()?;
    PiecewiseControl::from_values(u.grid(), u.dim(), values)
}

/// `‖a - b‖ / ‖b‖` in `L²`.
pub fn relative_l2_error(a: &PiecewiseControl, b: &PiecewiseControl) -> Result<f64> {
    let diff = PiecewiseControl::axpy(-1.0, b, a)?;
    Ok(diff.norm_l2() / b.norm_l2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TimeGrid;
    use crate::integrator::{integrate_adjoint, integrate_forward};
    use crate::measure::Beta44Law;
    use crate::problem::{LinearEnsemble, ScaledCost};

    fn gradient(p: &dyn EnsembleProblem, mu: &DiscreteMeasure, u: &PiecewiseControl, beta: f64) -> GradientReport {
        let tr = integrate_forward(p, mu, u).unwrap();
        let adj = integrate_adjoint(p, mu, u, &tr).unwrap();
        assemble_gradient(p, mu, u, beta, &tr, &adj).unwrap()
    }

    fn wavy(g: TimeGrid) -> PiecewiseControl {
        PiecewiseControl::from_fn(g, 2, |l| vec![(l as f64 * 0.9).sin(), (l as f64 * 0.4).cos() - 0.5]).unwrap()
    }

    #[test]
    fn zero_cost_gives_ridge_gradient() {
        let p = ScaledCost { inner: LinearEnsemble::linear2d([-1.0, -1.0]), factor: 0.0 };
        let mu = Beta44Law.quantile_quadrature(3).unwrap();
        let u = wavy(TimeGrid::new(8, 2).unwrap());
        let g = gradient(&p, &mu, &u, 0.7);
        assert_eq!(g.delta_u, u.scaled(0.7));
        let fd = fd_gradient(&p, &mu, &u, 0.7, 1e-6).unwrap();
        for (a, b) in fd.values().iter().zip(u.scaled(0.7).values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// Single member θ = 0 at u = 0: x(1) = 0, λ(1) = (2, 2) and
    /// λ(t) = λ(1)(I + A(1 - t)) = (2, 2 + 2(1 - t)); with B = I the
    /// trapezoid of the two node values is exact for this linear λ.
    #[test]
    fn closed_form_double_integrator() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let g = TimeGrid::new(8, 4).unwrap();
        let du = gradient(&p, &mu, &PiecewiseControl::zeros(g, 2), 1e-3).delta_u;
        for l in 0..8 {
            let tmid = (l as f64 + 0.5) / 8.0;
            assert!((du.row(l)[0] - 2.0).abs() < 1e-13);
            assert!((du.row(l)[1] - (2.0 + 2.0 * (1.0 - tmid))).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_finite_differences_on_linear2d() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = Beta44Law.quantile_quadrature(5).unwrap();
        let u = wavy(TimeGrid::new(16, 4).unwrap());
        let g = gradient(&p, &mu, &u, 1e-3);
        let fd = fd_gradient(&p, &mu, &u, 1e-3, 1e-6).unwrap();
        assert!(relative_l2_error(&g.delta_u, &fd).unwrap() < 1e-4);
        assert!((g.norm - g.delta_u.norm_l2()).abs() <= 1e-12 * g.norm);
    }

    #[test]
    fn riesz_consistency_along_directions() {
        let p = LinearEnsemble::linear2d([-1.0, 0.5]);
        let mu = Beta44Law.sample_empirical(6, 4).unwrap();
        let grid = TimeGrid::new(16, 4).unwrap();
        let u = wavy(grid);
        let beta = 1e-2;
        let du = gradient(&p, &mu, &u, beta).delta_u;
        for s in 0..5 {
            let v = PiecewiseControl::from_fn(grid, 2, |l| {
                vec![((l + s) as f64 * 1.7).sin(), ((l * s) as f64 * 0.3).cos()]
            })
            .unwrap();
            let eps = 1e-6;
            let fp = endpoint_cost(&p, &mu, &PiecewiseControl::axpy(eps, &v, &u).unwrap(), beta).unwrap().total;
            let fm = endpoint_cost(&p, &mu, &PiecewiseControl::axpy(-eps, &v, &u).unwrap(), beta).unwrap().total;
            let directional = (fp - fm) / (2.0 * eps);
            let inner = du.l2_inner(&v).unwrap();
            assert!((directional - inner).abs() <= 1e-3 * inner.abs().max(1e-12), "{directional} vs {inner}");
        }
    }

    #[test]
    fn doubling_terminal_cost_doubles_adjoint_part() {
        let base = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = Beta44Law.quantile_quadrature(4).unwrap();
        let u = wavy(TimeGrid::new(10, 2).unwrap());
        let beta = 0.1;
        let g1 = gradient(&base, &mu, &u, beta).delta_u;
        let g2 = gradient(&ScaledCost { inner: base.clone(), factor: 2.0 }, &mu, &u, beta).delta_u;
        let ridge = u.scaled(beta);
        let a1 = PiecewiseControl::axpy(-1.0, &ridge, &g1).unwrap();
        let a2 = PiecewiseControl::axpy(-1.0, &ridge, &g2).unwrap();
        for (x, y) in a1.values().iter().zip(a2.values()) {
            assert!((2.0 * x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn inconsistent_bundles() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = Beta44Law.quantile_quadrature(2).unwrap();
        let u = PiecewiseControl::zeros(TimeGrid::new(4, 2).unwrap(), 2);
        let tr = integrate_forward(&p, &mu, &u).unwrap();
        let adj = integrate_adjoint(&p, &mu, &u, &tr).unwrap();
        let other = Beta44Law.quantile_quadrature(3).unwrap();
        assert!(assemble_gradient(&p, &other, &u, 0.1, &tr, &adj).is_err());
        assert!(fd_gradient(&p, &mu, &u, 0.1, 0.0).is_err());
    }
}

//! Exact discrete optimum for linear ensembles with quadratic terminal cost.
//!
//! For members `ẋ = A(θ)x + B(θ)u` and cost `|x(1) - y(θ)|²`, the terminal
//! state is affine in the stacked control: `x_j(1) = Φ_j x₀ + Σ_l Γ_l^j u_l`
//! with `Φ_j = exp(A_j)` and `Γ_l^j = ∫ exp(A_j(1-s)) B_j ds` over interval
//! `l`. The cost is then a strictly convex quadratic in `ℝ^{Mk}` whose
//! normal equations are solved by Cholesky.

use nalgebra::{DMatrix, DVector};

use crate::control::{PiecewiseControl, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::par;
use crate::problem::EnsembleProblem;

/// Gram condition estimates above this are flagged as ill-conditioned.
pub const CONDITION_WARNING: f64 = 1e12;

const TAYLOR_TERMS: usize = 13;

/// Matrix exponential by scaling and squaring with a 13-term Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for i in 1..=TAYLOR_TERMS {
        term = &term * &scaled / i as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub u_opt: PiecewiseControl,
    pub cost_opt: f64,
    /// `x_j(1)` under `u_opt`, one row per member.
    pub per_member_terminal: Vec<Vec<f64>>,
    /// Ratio of extreme eigenvalues of the normal-equations matrix.
    pub gram_condition: f64,
    /// Relative residual of the normal equations at `u_opt`.
    pub residual: f64,
}

impl LqSolution {
    pub fn is_ill_conditioned(&self) -> bool {
        self.gram_condition > CONDITION_WARNING
    }
}

struct MemberMaps {
    /// `n x (M k)` input map `[Γ_1 … Γ_M]`.
    gamma: DMatrix<f64>,
    /// `Φ x₀ - y`.
    offset: DVector<f64>,
    free: DVector<f64>,
}

fn member_maps(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    grid: TimeGrid,
) -> Result<MemberMaps> {
    let (n, k) = (problem.state_dim(), problem.control_dim());
    let (a, b) = problem
        .linear_form(theta)
        .ok_or_else(|| Error::Capability("the oracle needs linear member dynamics".into()))?;
    let target = problem
        .quadratic_target(theta)
        .ok_or_else(|| Error::Capability("the oracle needs a terminal cost |x - y|²".into()))?;
    let a = DMatrix::from_row_slice(n, n, &a);
    let b = DMatrix::from_row_slice(n, k, &b);
    let m = grid.intervals();
    let h = grid.h();

    // exp(h [[A, B], [0, 0]]) = [[e^{Ah}, ∫₀ʰ e^{Ar} dr B], [0, I]]
    let mut aug = DMatrix::<f64>::zeros(n + k, n + k);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&a * h));
    aug.view_mut((0, n), (n, k)).copy_from(&(&b * h));
    let e = expm(&aug);
    let step = e.view((0, 0), (n, n)).into_owned();
    let input = e.view((0, n), (n, k)).into_owned();

    let mut gamma = DMatrix::<f64>::zeros(n, m * k);
    // Γ_l = e^{A(1 - (l+1)h)} W, built from the last interval backwards.
    let mut carry = input;
    for l in (0..m).rev() {
        gamma.view_mut((0, l * k), (n, k)).copy_from(&carry);
        carry = &step * carry;
    }
    let mut x0 = vec![0.0; n];
    problem.initial_state(theta, &mut x0);
    let free = expm(&a) * DVector::from_vec(x0);
    let offset = &free - DVector::from_vec(target);
    Ok(MemberMaps { gamma, offset, free })
}

/// Exact minimizer of `Σ α_j |x_j(1) - y_j|² + (β/2)‖u‖²` over `U_M`.
pub fn solve_lq(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    grid: TimeGrid,
    beta: f64,
) -> Result<LqSolution> {
    if !(beta > 0.0) {
        return Err(Error::arg(format!("beta must be positive, got {beta}")));
    }
    let k = problem.control_dim();
    let dim = grid.intervals() * k;
    let maps = par::map_indexed(measure.len(), |j| member_maps(problem, measure.theta(j), grid))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let reg = beta / grid.intervals() as f64;
    let mut normal = DMatrix::<f64>::identity(dim, dim) * reg;
    let mut rhs = DVector::<f64>::zeros(dim);
    for (j, mm) in maps.iter().enumerate() {
        let alpha = measure.weight(j);
        normal.gemm_tr(2.0 * alpha, &mm.gamma, &mm.gamma, 1.0);
        rhs.gemv_tr(-2.0 * alpha, &mm.gamma, &mm.offset, 1.0);
    }
    let eig = normal.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let gram_condition = hi / lo;
    let chol = normal
        .clone()
        .cholesky()
        .ok_or_else(|| Error::arg("normal equations are not positive definite"))?;
    let sol = chol.solve(&rhs);
    let resid = (&normal * &sol - &rhs).norm();
    let residual = resid / (normal.norm() * sol.norm() + rhs.norm()).max(f64::MIN_POSITIVE);

    let mut integral = 0.0;
    let mut per_member_terminal = Vec::with_capacity(maps.len());
    for (j, mm) in maps.iter().enumerate() {
        let terminal = &mm.free + &mm.gamma * &sol;
        let miss = &mm.offset + &mm.gamma * &sol;
        integral += measure.weight(j) * miss.norm_squared();
        per_member_terminal.push(terminal.iter().copied().collect());
    }
    let u_opt = PiecewiseControl::from_values(grid, k, sol.iter().copied().collect())?;
    let cost_opt = integral + 0.5 * beta * u_opt.norm_l2_sq();
    Ok(LqSolution { u_opt, cost_opt, per_member_terminal, gram_condition, residual })
}

/// Numerical rank of the Kalman matrix of the stacked system
/// `ẋ = diag(A(θ_j)) x + [B(θ_j)]_j u`. Columns are scaled to unit norm
/// before the SVD, which leaves the rank unchanged; singular values below
/// `1e-9` times the largest count as zero.
pub fn kalman_rank(problem: &dyn EnsembleProblem, measure: &DiscreteMeasure) -> Result<usize> {
    let (n, k) = (problem.state_dim(), problem.control_dim());
    let nn = n * measure.len();
    let mut a = DMatrix::<f64>::zeros(nn, nn);
    let mut b = DMatrix::<f64>::zeros(nn, k);
    for j in 0..measure.len() {
        let (aj, bj) = problem
            .linear_form(measure.theta(j))
            .ok_or_else(|| Error::Capability("the Kalman test needs linear member dynamics".into()))?;
        a.view_mut((j * n, j * n), (n, n)).copy_from(&DMatrix::from_row_slice(n, n, &aj));
        b.view_mut((j * n, 0), (n, k)).copy_from(&DMatrix::from_row_slice(n, k, &bj));
    }
    let mut kalman = DMatrix::<f64>::zeros(nn, nn * k);
    let mut block = b;
    for r in 0..nn {
        kalman.view_mut((0, r * k), (nn, k)).copy_from(&block);
        block = &a * block;
    }
    for mut col in kalman.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let sv = kalman.svd(false, false).singular_values;
    let largest = sv.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > 1e-9 * largest).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Beta44Law;
    use crate::objective::endpoint_cost;
    use crate::problem::{LinearEnsemble, Logistic1d};

    #[test]
    fn nilpotent_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&a);
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn exponential_of_rotation_generator() {
        let t = 3.7;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a);
        let expect = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((e - expect).norm() < 1e-13);
    }

    #[test]
    fn exponential_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-4.0, 0.3, 2.5]));
        let e = expm(&a);
        for (i, v) in [-4.0f64, 0.3, 2.5].iter().enumerate() {
            assert!((e[(i, i)] - v.exp()).abs() < 1e-13 * v.exp());
        }
    }

    /// Brute-force grid search over u ∈ [-2, 0]² for M = 1, θ = 0 and a
    /// tiny β: x(1) = (u₁ + u₂/2, u₂), so the minimizer is (-0.5, -1).
    #[test]
    fn single_interval_double_integrator() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let grid = TimeGrid::new(1, 4).unwrap();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for a in 0..=400 {
            for b in 0..=400 {
                let u = [-2.0 + a as f64 * 0.005, -2.0 + b as f64 * 0.005];
                let c = (u[0] + 0.5 * u[1] + 1.0).powi(2) + (u[1] + 1.0).powi(2);
                if c < best.0 {
                    best = (c, u[0], u[1]);
                }
            }
        }
        assert!((best.1 + 0.5).abs() < 1e-9 && (best.2 + 1.0).abs() < 1e-9);
        let sol = solve_lq(&p, &mu, grid, 1e-9).unwrap();
        assert!((sol.u_opt.row(0)[0] + 0.5).abs() < 1e-6);
        assert!((sol.u_opt.row(0)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn heavy_regularization_kills_control() {
        let p = LinearEnsemble::linear2d([-1.0, 2.0]);
        let mu = Beta44Law.quantile_quadrature(5).unwrap();
        // x₀ = 0, so the uncontrolled miss is |y|² = 5; the gap closes like 1/β.
        let mut prev_gap = f64::INFINITY;
        for (beta, tol) in [(1e3, 2e-2), (1e5, 1e-3)] {
            let sol = solve_lq(&p, &mu, TimeGrid::new(8, 4).unwrap(), beta).unwrap();
            assert!(sol.u_opt.norm_l2() < 1e-2);
            let gap = 5.0 - sol.cost_opt;
            assert!(gap > 0.0 && gap < tol && gap < prev_gap);
            prev_gap = gap;
        }
    }

    #[test]
    fn oracle_matches_integrated_cost() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let mu = Beta44Law.quantile_quadrature(6).unwrap();
        let grid = TimeGrid::new(16, 4).unwrap();
        let sol = solve_lq(&p, &mu, grid, 1e-3).unwrap();
        let c = endpoint_cost(&p, &mu, &sol.u_opt, 1e-3).unwrap();
        assert!(((c.total - sol.cost_opt) / sol.cost_opt).abs() < 1e-6);
        assert!(sol.residual < 1e-9);
        let zero = endpoint_cost(&p, &mu, &PiecewiseControl::zeros(grid, 2), 1e-3).unwrap();
        assert!(sol.cost_opt <= zero.total);
    }

    #[test]
    fn capability_errors() {
        let mu = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let grid = TimeGrid::new(4, 1).unwrap();
        assert!(matches!(solve_lq(&Logistic1d::default(), &mu, grid, 1.0), Err(Error::Capability(_))));
        assert!(matches!(kalman_rank(&Logistic1d::default(), &mu), Err(Error::Capability(_))));
        assert!(solve_lq(&LinearEnsemble::linear2d([0.0, 0.0]), &mu, grid, 0.0).is_err());
    }

    #[test]
    fn kalman_rank_examples() {
        let p = LinearEnsemble::linear2d([-1.0, -1.0]);
        let pair = DiscreteMeasure::uniform(1, vec![-0.25, 0.25]).unwrap();
        assert_eq!(kalman_rank(&p, &pair).unwrap(), 4);
        let dup = DiscreteMeasure::uniform(1, vec![0.1, 0.1]).unwrap();
        assert!(kalman_rank(&p, &dup).unwrap() < 4);
        assert_eq!(kalman_rank(&p, &DiscreteMeasure::dirac(&[0.0]).unwrap()).unwrap(), 2);
    }
}

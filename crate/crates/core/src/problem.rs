//! Ensemble problem definitions.
//!
//! An ensemble is the family `ẋ = F₀(x,θ) + F(x,θ) u` indexed by a parameter
//! `θ`, with initial map `x₀(θ)` and non-negative terminal cost `a(x,θ)`.
//! All matrices are row-major; `F(x,θ)` is `n x k` with column `i` holding
//! the controlled field `F_i`.

use crate::error::{Error, Result};

/// Field evaluators and costs of a parametrized affine-control system.
///
/// Implementations must be pure functions of their arguments: the
/// integrator calls them concurrently from several threads.
pub trait EnsembleProblem: Send + Sync {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;
    /// Control dimension `k`.
    fn control_dim(&self) -> usize;
    /// Parameter dimension `d`.
    fn param_dim(&self) -> usize {
        1
    }

    /// Drift `F₀(x,θ)` into `out` (length `n`).
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]);
    /// Controlled fields `F(x,θ)` into `out` (`n x k`).
    fn control_fields(&self, x: &[f64], theta: &[f64], out: &mut [f64]);
    /// `∂F₀/∂x` into `out` (`n x n`).
    fn drift_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]);
    /// `∂F_i/∂x` into `out` (`n x n`), `i` zero based.
    fn control_field_jacobian(&self, x: &[f64], theta: &[f64], i: usize, out: &mut [f64]);

    fn initial_state(&self, theta: &[f64], out: &mut [f64]);
    fn terminal_cost(&self, x: &[f64], theta: &[f64]) -> f64;
    fn terminal_cost_grad(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// `A(θ)` (`n x n`) and `B(θ)` (`n x k`) when the member dynamics are
    /// `ẋ = A(θ)x + B(θ)u`.
    fn linear_form(&self, _theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// `y(θ)` when the terminal cost is exactly `|x - y(θ)|²`.
    fn quadratic_target(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Total state Jacobian `∂F₀/∂x + Σ u_i ∂F_i/∂x`.
    fn flow_jacobian(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift_jacobian(x, theta, out);
        let n = self.state_dim();
        let mut tmp = vec![0.0; n * n];
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                self.control_field_jacobian(x, theta, i, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += ui * t);
            }
        }
    }

    /// Velocity `F₀(x,θ) + F(x,θ)u`; `scratch` has length `n * k`.
    fn velocity(&self, x: &[f64], theta: &[f64], u: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let k = u.len();
        self.drift(x, theta, out);
        self.control_fields(x, theta, scratch);
        for (r, o) in out.iter_mut().enumerate() {
            *o += scratch[r * k..(r + 1) * k].iter().zip(u).map(|(f, v)| f * v).sum::<f64>();
        }
    }
}

/// Linear ensemble with affine parameter dependence:
/// `A(θ) = A₀ + θ A₁`, `B(θ) = B₀ + θ B₁`, constant `x₀`, and terminal cost
/// `|x - y|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEnsemble {
    n: usize,
    k: usize,
    a0: Vec<f64>,
    a1: Vec<f64>,
    b0: Vec<f64>,
    b1: Vec<f64>,
    x0: Vec<f64>,
    target: Vec<f64>,
}

impl LinearEnsemble {
    pub fn new(
        n: usize,
        k: usize,
        a0: Vec<f64>,
        a1: Vec<f64>,
        b0: Vec<f64>,
        b1: Vec<f64>,
        x0: Vec<f64>,
        target: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::arg("state and control dimensions must be positive"));
        }
        let checks = [
            ("a0", a0.len(), n * n),
            ("a1", a1.len(), n * n),
            ("b0", b0.len(), n * k),
            ("b1", b1.len(), n * k),
            ("x0", x0.len(), n),
            ("y_tar", target.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::dim(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(Self { n, k, a0, a1, b0, b1, x0, target })
    }

    /// `A(θ) = [[0, 1], [θ, 0]]`, `B = I₂`, `x₀ = 0`, cost `|x - y_tar|²`.
    pub fn linear2d(target: [f64; 2]) -> Self {
        Self {
            n: 2,
            k: 2,
            a0: vec![0.0, 1.0, 0.0, 0.0],
            a1: vec![0.0, 0.0, 1.0, 0.0],
            b0: vec![1.0, 0.0, 0.0, 1.0],
            b1: vec![0.0; 4],
            x0: vec![0.0; 2],
            target: target.to_vec(),
        }
    }

    pub fn with_initial_state(mut self, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.n {
            return Err(Error::dim(format!("x0 has {} entries, expected {}", x0.len(), self.n)));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn a_matrix(&self, theta: f64) -> Vec<f64> {
        self.a0.iter().zip(&self.a1).map(|(p, q)| p + theta * q).collect()
    }

    pub fn b_matrix(&self, theta: f64) -> Vec<f64> {
        self.b0.iter().zip(&self.b1).map(|(p, q)| p + theta * q).collect()
    }
}

impl EnsembleProblem for LinearEnsemble {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.k
    }

    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let t = theta[0];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.n).map(|c| (self.a0[r * self.n + c] + t * self.a1[r * self.n + c]) * x[c]).sum();
        }
    }

    fn control_fields(&self, _x: &[f64], theta: &[f64], out: &mut [f64]) {
        let t = theta[0];
        out.iter_mut().zip(self.b0.iter().zip(&self.b1)).for_each(|(o, (p, q))| *o = p + t * q);
    }

    fn drift_jacobian(&self, _x: &[f64], theta: &[f64], out: &mut [f64]) {
        let t = theta[0];
        out.iter_mut().zip(self.a0.iter().zip(&self.a1)).for_each(|(o, (p, q))| *o = p + t * q);
    }

    fn control_field_jacobian(&self, _x: &[f64], _theta: &[f64], _i: usize, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn flow_jacobian(&self, x: &[f64], theta: &[f64], _u: &[f64], out: &mut [f64]) {
        self.drift_jacobian(x, theta, out);
    }

    fn initial_state(&self, _theta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.x0);
    }

    fn terminal_cost(&self, x: &[f64], _theta: &[f64]) -> f64 {
        x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn terminal_cost_grad(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().zip(x.iter().zip(&self.target)).for_each(|(o, (a, b))| *o = 2.0 * (a - b));
    }

    fn linear_form(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.a_matrix(theta[0]), self.b_matrix(theta[0])))
    }

    fn quadratic_target(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.target.clone())
    }
}

/// Scalar logistic ensemble `ẋ = θ x (1 - x) + u` with cost `(x - y)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic1d {
    pub x0: f64,
    pub target: f64,
}

impl Default for Logistic1d {
    fn default() -> Self {
        Self { x0: 0.5, target: 0.0 }
    }
}

impl EnsembleProblem for Logistic1d {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * x[0] * (1.0 - x[0]);
    }

    fn control_fields(&self, _x: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn drift_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * (1.0 - 2.0 * x[0]);
    }

    fn control_field_jacobian(&self, _x: &[f64], _theta: &[f64], _i: usize, out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn initial_state(&self, _theta: &[f64], out: &mut [f64]) {
        out[0] = self.x0;
    }

    fn terminal_cost(&self, x: &[f64], _theta: &[f64]) -> f64 {
        (x[0] - self.target).powi(2)
    }

    fn terminal_cost_grad(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * (x[0] - self.target);
    }

    fn quadratic_target(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![self.target])
    }
}

/// Wraps a problem and multiplies its terminal cost by a constant factor.
/// A factor of zero gives the pure-regularization problem `a ≡ 0`.
#[derive(Debug, Clone)]
pub struct ScaledCost<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: EnsembleProblem> EnsembleProblem for ScaledCost<P> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.drift(x, theta, out)
    }
    fn control_fields(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.control_fields(x, theta, out)
    }
    fn drift_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.drift_jacobian(x, theta, out)
    }
    fn control_field_jacobian(&self, x: &[f64], theta: &[f64], i: usize, out: &mut [f64]) {
        self.inner.control_field_jacobian(x, theta, i, out)
    }
    fn flow_jacobian(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.flow_jacobian(x, theta, u, out)
    }
    fn initial_state(&self, theta: &[f64], out: &mut [f64]) {
        self.inner.initial_state(theta, out)
    }
    fn terminal_cost(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.factor * self.inner.terminal_cost(x, theta)
    }
    fn terminal_cost_grad(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.terminal_cost_grad(x, theta, out);
        out.iter_mut().for_each(|g| *g *= self.factor);
    }
    fn linear_form(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.linear_form(theta)
    }
}

/// Parameters for [`builtin_problem`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemParams {
    /// Target `y_tar` (length `n`).
    pub target: Option<Vec<f64>>,
    /// Initial state `x₀` (length `n`).
    pub x0: Option<Vec<f64>>,
    /// `(n, k, A₀, A₁, B₀, B₁)` for `generic-lti`.
    pub lti: Option<(usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

pub const BUILTIN_NAMES: [&str; 3] = ["linear2d", "generic-lti", "logistic1d"];

/// Built-in problem by name: `linear2d`, `generic-lti` or `logistic1d`.
pub fn builtin_problem(name: &str, params: &ProblemParams) -> Result<Box<dyn EnsembleProblem>> {
    match name {
        "linear2d" => {
            let y = params.target.clone().unwrap_or_else(|| vec![-1.0, -1.0]);
            if y.len() != 2 {
                return Err(Error::dim("linear2d target needs 2 entries"));
            }
            let mut p = LinearEnsemble::linear2d([y[0], y[1]]);
            if let Some(x0) = &params.x0 {
                p = p.with_initial_state(x0.clone())?;
            }
            Ok(Box::new(p))
        }
        "generic-lti" => {
            let (n, k, a0, a1, b0, b1) =
                params.lti.clone().ok_or_else(|| Error::arg("generic-lti needs a0, a1, b0, b1 matrices"))?;
            let x0 = params.x0.clone().unwrap_or_else(|| vec![0.0; n]);
            let y = params.target.clone().unwrap_or_else(|| vec![0.0; n]);
            Ok(Box::new(LinearEnsemble::new(n, k, a0, a1, b0, b1, x0, y)?))
        }
        "logistic1d" => {
            let mut p = Logistic1d::default();
            if let Some(y) = &params.target {
                if y.len() != 1 {
                    return Err(Error::dim("logistic1d target is a scalar"));
                }
                p.target = y[0];
            }
            if let Some(x0) = &params.x0 {
                if x0.len() != 1 {
                    return Err(Error::dim("logistic1d x0 is a scalar"));
                }
                p.x0 = x0[0];
            }
            Ok(Box::new(p))
        }
        other => Err(Error::arg(format!("unknown problem `{other}` (expected one of {BUILTIN_NAMES:?})"))),
    }
}

//! Forward state and backward costate integration on the substep grid.
//!
//! Both passes use classical fixed-step RK4 with step `1/(M S)`. The control
//! is constant on each interval, so the forward field is autonomous inside
//! every step. The backward pass evaluates Jacobians along the stored
//! trajectory; RK4 half-step states come from cubic Hermite interpolation
//! between the two adjacent nodes, which keeps the backward pass fourth order.

use std::fmt::Write as _;

use crate::control::{PiecewiseControl, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::par;
use crate::problem::EnsembleProblem;

/// States beyond this norm abort the integration.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Member trajectories at every substep node.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    grid: TimeGrid,
    n: usize,
    thetas: Vec<f64>,
    param_dim: usize,
    states: Vec<f64>,
}

/// Member costates (row covectors) at every substep node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointBundle {
    grid: TimeGrid,
    n: usize,
    thetas: Vec<f64>,
    param_dim: usize,
    costates: Vec<f64>,
}

macro_rules! bundle_accessors {
    ($ty:ty, $field:ident) => {
        impl $ty {
            pub fn grid(&self) -> TimeGrid {
                self.grid
            }

            pub fn state_dim(&self) -> usize {
                self.n
            }

            /// Number of members `N`.
            pub fn members(&self) -> usize {
                self.thetas.len() / self.param_dim
            }

            pub fn theta(&self, j: usize) -> &[f64] {
                &self.thetas[j * self.param_dim..(j + 1) * self.param_dim]
            }

            /// Value for member `j` at substep node `m`.
            pub fn at(&self, j: usize, m: usize) -> &[f64] {
                let stride = self.grid.node_count() * self.n;
                let off = j * stride + m * self.n;
                &self.$field[off..off + self.n]
            }

            /// Value for member `j` at interval node `l` (time `l/M`).
            pub fn at_node(&self, j: usize, l: usize) -> &[f64] {
                self.at(j, self.grid.interval_node(l))
            }

            /// Value for member `j` at `t = 1`.
            pub fn terminal(&self, j: usize) -> &[f64] {
                self.at(j, self.grid.total_steps())
            }

            /// Whole substep series of member `j`.
            pub fn member(&self, j: usize) -> &[f64] {
                let stride = self.grid.node_count() * self.n;
                &self.$field[j * stride..(j + 1) * stride]
            }

            pub fn raw(&self) -> &[f64] {
                &self.$field
            }

            /// CSV `j,theta,t,<prefix>1..n`; interval nodes only unless
            /// `full_grid` is set.
            pub fn to_csv(&self, prefix: &str, full_grid: bool) -> String {
                let mut out = self.csv_header(prefix);
                for j in 0..self.members() {
                    self.csv_rows(j, full_grid, &mut out);
                }
                out
            }

            /// Same layout as [`Self::to_csv`] restricted to member `j`.
            pub fn member_csv(&self, j: usize, prefix: &str, full_grid: bool) -> String {
                let mut out = self.csv_header(prefix);
                self.csv_rows(j, full_grid, &mut out);
                out
            }

            fn csv_header(&self, prefix: &str) -> String {
                let mut out = String::from("j,");
                if self.param_dim == 1 {
                    out.push_str("theta");
                } else {
                    let cols: Vec<String> = (1..=self.param_dim).map(|i| format!("theta{i}")).collect();
                    out.push_str(&cols.join(","));
                }
                out.push_str(",t");
                for i in 1..=self.n {
                    let _ = write!(out, ",{prefix}{i}");
                }
                out.push('\n');
                out
            }

            fn csv_rows(&self, j: usize, full_grid: bool, out: &mut String) {
                let stride = if full_grid { 1 } else { self.grid.substeps() };
                for m in (0..self.grid.node_count()).step_by(stride) {
                    let _ = write!(out, "{j}");
                    for t in self.theta(j) {
                        let _ = write!(out, ",{t}");
                    }
                    let _ = write!(out, ",{}", self.grid.node_time(m));
                    for v in self.at(j, m) {
                        let _ = write!(out, ",{v}");
                    }
                    out.push('\n');
                }
            }
        }
    };
}

bundle_accessors!(TrajectoryBundle, states);
bundle_accessors!(AdjointBundle, costates);

impl TrajectoryBundle {
    /// Assemble from per-member substep series (used by the sweep in the
    /// iterative maximum principle, which builds trajectories interval by
    /// interval).
    pub(crate) fn from_parts(grid: TimeGrid, n: usize, measure: &DiscreteMeasure, states: Vec<f64>) -> Self {
        debug_assert_eq!(states.len(), measure.len() * grid.node_count() * n);
        Self { grid, n, thetas: measure.thetas().to_vec(), param_dim: measure.dim(), states }
    }

    /// Largest Euclidean state norm over all members and nodes.
    pub fn max_norm(&self) -> f64 {
        self.states.chunks(self.n).map(norm).fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// RK4 step of a linear member `ẋ = Ax + Bu` with constant `u`, written as
/// `x ↦ T x + R u` with `T = Σ_{p≤4} (hA)^p/p!` and
/// `R = h Σ_{p≤3} (hA)^p/(p+1)! B`. The backward pass is `λ ↦ λ T`.
struct LinearStep {
    t: Vec<f64>,
    r: Vec<f64>,
}

impl LinearStep {
    fn new(a: &[f64], b: &[f64], n: usize, k: usize, dt: f64) -> Self {
        let matmul = |x: &[f64], y: &[f64], cols: usize| {
            let mut out = vec![0.0; n * cols];
            for r in 0..n {
                for c in 0..cols {
                    out[r * cols + c] = (0..n).map(|i| x[r * n + i] * y[i * cols + c]).sum();
                }
            }
            out
        };
        let ha: Vec<f64> = a.iter().map(|v| v * dt).collect();
        let mut t = vec![0.0; n * n];
        let mut s = vec![0.0; n * n];
        let mut power: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut fact = 1.0;
        for p in 0..=4 {
            if p > 0 {
                power = matmul(&power, &ha, n);
                fact *= p as f64;
            }
            t.iter_mut().zip(&power).for_each(|(o, v)| *o += v / fact);
            if p < 4 {
                let f = fact * (p + 1) as f64;
                s.iter_mut().zip(&power).for_each(|(o, v)| *o += dt * v / f);
            }
        }
        let r = matmul(&s, b, k);
        Self { t, r }
    }
}

/// Scratch buffers for one member.
pub(crate) struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    fields: Vec<f64>,
    jac: Vec<f64>,
    mid: Vec<f64>,
    linear: Option<LinearStep>,
}

impl Workspace {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        Self {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
            fields: vec![0.0; n * k],
            jac: vec![0.0; n * n],
            mid: vec![0.0; n],
            linear: None,
        }
    }

    /// Workspace for member `theta`, with the step map precomputed when the
    /// member is linear.
    pub(crate) fn for_member(problem: &dyn EnsembleProblem, theta: &[f64], dt: f64) -> Self {
        let (n, k) = (problem.state_dim(), problem.control_dim());
        let mut ws = Self::new(n, k);
        ws.linear = problem.linear_form(theta).map(|(a, b)| LinearStep::new(&a, &b, n, k, dt));
        ws
    }
}

fn check_inputs(problem: &dyn EnsembleProblem, measure: &DiscreteMeasure, u: &PiecewiseControl) -> Result<()> {
    if u.dim() != problem.control_dim() {
        return Err(Error::dim(format!(
            "control has dimension {}, problem expects {}",
            u.dim(),
            problem.control_dim()
        )));
    }
    if measure.dim() != problem.param_dim() {
        return Err(Error::dim(format!(
            "measure atoms have dimension {}, problem expects {}",
            measure.dim(),
            problem.param_dim()
        )));
    }
    Ok(())
}

/// One RK4 step of `ẋ = F₀(x) + F(x)u` from `x` into `out`.
fn rk4_step(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    u: &[f64],
    dt: f64,
    x: &[f64],
    out: &mut [f64],
    ws: &mut Workspace,
) {
    let Workspace { k, tmp, fields, .. } = ws;
    let [k1, k2, k3, k4] = k;
    problem.velocity(x, theta, u, fields, k1);
    tmp.iter_mut().zip(x.iter().zip(k1.iter())).for_each(|(t, (a, b))| *t = a + 0.5 * dt * b);
    problem.velocity(tmp, theta, u, fields, k2);
    tmp.iter_mut().zip(x.iter().zip(k2.iter())).for_each(|(t, (a, b))| *t = a + 0.5 * dt * b);
    problem.velocity(tmp, theta, u, fields, k3);
    tmp.iter_mut().zip(x.iter().zip(k3.iter())).for_each(|(t, (a, b))| *t = a + dt * b);
    problem.velocity(tmp, theta, u, fields, k4);
    for i in 0..x.len() {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn guard(v: &[f64], member: usize, time: f64) -> Result<()> {
    // NaN fails the comparison, so one test covers both cases.
    let sq: f64 = v.iter().map(|a| a * a).sum();
    if !(sq <= DIVERGENCE_BOUND * DIVERGENCE_BOUND) {
        return Err(Error::Divergence { member, time });
    }
    Ok(())
}

/// Advance one member across control interval `l`. `series` holds the whole
/// substep series of the member; node `l S` must already be filled.
pub(crate) fn advance_interval(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    u_row: &[f64],
    grid: TimeGrid,
    l: usize,
    member: usize,
    series: &mut [f64],
    ws: &mut Workspace,
) -> Result<()> {
    let n = problem.state_dim();
    let dt = grid.dt();
    let start = grid.interval_node(l);
    if let Some(step) = &ws.linear {
        // `R u` is the same for every substep of the interval.
        let k = u_row.len();
        for (r, o) in ws.mid.iter_mut().enumerate() {
            *o = (0..k).map(|c| step.r[r * k + c] * u_row[c]).sum();
        }
    }
    for m in start..start + grid.substeps() {
        let (head, tail) = series.split_at_mut((m + 1) * n);
        let x = &head[m * n..];
        let next = &mut tail[..n];
        match &ws.linear {
            Some(step) => {
                for r in 0..n {
                    next[r] = (0..n).map(|c| step.t[r * n + c] * x[c]).sum::<f64>() + ws.mid[r];
                }
            }
            None => rk4_step(problem, theta, u_row, dt, x, next, ws),
        }
        guard(next, member, grid.node_time(m + 1))?;
    }
    Ok(())
}

fn forward_member(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    u: &PiecewiseControl,
    member: usize,
    series: &mut [f64],
) -> Result<()> {
    let n = problem.state_dim();
    let grid = u.grid();
    let mut ws = Workspace::for_member(problem, theta, grid.dt());
    problem.initial_state(theta, &mut series[..n]);
    guard(&series[..n], member, 0.0)?;
    for l in 0..grid.intervals() {
        advance_interval(problem, theta, u.row(l), grid, l, member, series, &mut ws)?;
    }
    Ok(())
}

/// Integrate every member of `measure` under the shared control `u`.
pub fn integrate_forward(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
) -> Result<TrajectoryBundle> {
    check_inputs(problem, measure, u)?;
    let grid = u.grid();
    let n = problem.state_dim();
    let stride = grid.node_count() * n;
    let mut states = vec![0.0; measure.len() * stride];
    let mut outcome: Vec<Result<()>> = (0..measure.len()).map(|_| Ok(())).collect();
    {
        let slots: Vec<(&mut [f64], &mut Result<()>)> = states.chunks_mut(stride).zip(outcome.iter_mut()).collect();
        let run = |j: usize, series: &mut [f64]| forward_member(problem, measure.theta(j), u, j, series);
        run_members(slots, &run);
    }
    outcome.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(TrajectoryBundle::from_parts(grid, n, measure, states))
}

/// Drive `f` over disjoint member slots and record each result.
fn run_members<F>(mut slots: Vec<(&mut [f64], &mut Result<()>)>, f: &F)
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    par::for_each_mut(&mut slots, |j, (series, res)| **res = f(j, series));
}

/// `out = v J` for a row vector `v` and row-major `n x n` matrix `J`.
fn row_times(v: &[f64], jac: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..n).map(|r| v[r] * jac[r * n + c]).sum();
    }
}

fn adjoint_member(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    u: &PiecewiseControl,
    member: usize,
    xs: &[f64],
    lam: &mut [f64],
) -> Result<()> {
    let n = problem.state_dim();
    let grid = u.grid();
    let dt = grid.dt();
    let last = grid.total_steps();
    let mut ws = Workspace::for_member(problem, theta, dt);
    problem.terminal_cost_grad(&xs[last * n..(last + 1) * n], theta, &mut lam[last * n..]);
    guard(&lam[last * n..], member, 1.0)?;
    if let Some(step) = &ws.linear {
        for m in (0..last).rev() {
            let (head, tail) = lam.split_at_mut((m + 1) * n);
            row_times(&tail[..n], &step.t, &mut head[m * n..]);
            guard(&head[m * n..], member, grid.node_time(m))?;
        }
        return Ok(());
    }
    // Velocity and Jacobian at the upper node, reused from the previous
    // step while the control row stays the same.
    let mut vel_hi = vec![0.0; n];
    let mut vel_lo = vec![0.0; n];
    let mut jac_hi = vec![0.0; n * n];
    let mut jac_lo = vec![0.0; n * n];
    let mut cached = false;
    for m in (0..last).rev() {
        let urow = u.row_at_step(m);
        let x_hi = &xs[(m + 1) * n..(m + 2) * n];
        let x_lo = &xs[m * n..(m + 1) * n];
        let (head, tail) = lam.split_at_mut((m + 1) * n);
        let l_hi = &tail[..n];
        let l_lo = &mut head[m * n..];
        let Workspace { k, tmp, jac, mid, fields, .. } = &mut ws;
        let [k1, k2, k3, k4] = k;
        if !cached {
            problem.velocity(x_hi, theta, urow, fields, &mut vel_hi);
            problem.flow_jacobian(x_hi, theta, urow, &mut jac_hi);
        }
        problem.velocity(x_lo, theta, urow, fields, &mut vel_lo);
        problem.flow_jacobian(x_lo, theta, urow, &mut jac_lo);
        // Cubic Hermite midpoint: (x_lo + x_hi)/2 + dt/8 (f(x_lo) - f(x_hi)).
        for i in 0..n {
            mid[i] = 0.5 * (x_lo[i] + x_hi[i]) + dt / 8.0 * (vel_lo[i] - vel_hi[i]);
        }
        // Backward in time: dλ/ds = λ J with s = 1 - t.
        row_times(l_hi, &jac_hi, k1);
        problem.flow_jacobian(mid, theta, urow, jac);
        tmp.iter_mut().zip(l_hi.iter().zip(k1.iter())).for_each(|(t, (a, b))| *t = a + 0.5 * dt * b);
        row_times(tmp, jac, k2);
        tmp.iter_mut().zip(l_hi.iter().zip(k2.iter())).for_each(|(t, (a, b))| *t = a + 0.5 * dt * b);
        row_times(tmp, jac, k3);
        tmp.iter_mut().zip(l_hi.iter().zip(k3.iter())).for_each(|(t, (a, b))| *t = a + dt * b);
        row_times(tmp, &jac_lo, k4);
        for i in 0..n {
            l_lo[i] = l_hi[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        std::mem::swap(&mut vel_hi, &mut vel_lo);
        std::mem::swap(&mut jac_hi, &mut jac_lo);
        cached = m % grid.substeps() != 0;
        guard(l_lo, member, grid.node_time(m))?;
    }
    Ok(())
}

/// Backward costate pass along `traj`, from `λ(1) = ∇ₓa(x(1), θ)`.
pub fn integrate_adjoint(
    problem: &dyn EnsembleProblem,
    measure: &DiscreteMeasure,
    u: &PiecewiseControl,
    traj: &TrajectoryBundle,
) -> Result<AdjointBundle> {
    check_inputs(problem, measure, u)?;
    if traj.grid() != u.grid() || traj.members() != measure.len() || traj.state_dim() != problem.state_dim() {
        return Err(Error::arg("trajectory bundle does not match the problem, measure and control"));
    }
    let grid = u.grid();
    let n = problem.state_dim();
    let stride = grid.node_count() * n;
    let mut costates = vec![0.0; measure.len() * stride];
    let mut outcome: Vec<Result<()>> = (0..measure.len()).map(|_| Ok(())).collect();
    {
        let slots: Vec<(&mut [f64], &mut Result<()>)> =
            costates.chunks_mut(stride).zip(outcome.iter_mut()).collect();
        let run = |j: usize, lam: &mut [f64]| adjoint_member(problem, measure.theta(j), u, j, traj.member(j), lam);
        run_members(slots, &run);
    }
    outcome.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(AdjointBundle { grid, n, thetas: measure.thetas().to_vec(), param_dim: measure.dim(), costates })
}

/// Sup-norm deviations of trajectories and costates under oscillating
/// perturbations of a base control.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub frequencies: Vec<usize>,
    pub trajectory: Vec<f64>,
    pub adjoint: Vec<f64>,
}

/// Intervals per oscillation period on the refined probe grid.
const PROBE_RESOLUTION: usize = 16;

/// For each frequency `m`, integrate a single member under
/// `u(t) + amplitude·sin(2πmt)·(1,…,1)` and report the largest node distance
/// from the unperturbed trajectory and costate. Each `m` must be a positive
/// multiple of the base grid's interval count; the perturbed control is the
/// exact interval mean of the sine on a grid with 16 intervals per period.
pub fn weak_convergence_probe(
    problem: &dyn EnsembleProblem,
    theta: &[f64],
    base_u: &PiecewiseControl,
    amplitude: f64,
    frequencies: &[usize],
) -> Result<ProbeResult> {
    let base_m = base_u.grid().intervals();
    if let Some(&f) = frequencies.iter().find(|&&f| f == 0 || f % base_m != 0) {
        return Err(Error::arg(format!(
            "frequency {f} cannot be resolved: it must be a positive multiple of M = {base_m}"
        )));
    }
    let measure = DiscreteMeasure::dirac(theta)?;
    let sup_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.chunks(problem.state_dim()).zip(b.chunks(problem.state_dim())).map(|(p, q)| {
            p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        }).fold(0.0, f64::max)
    };
    let mut result = ProbeResult { frequencies: frequencies.to_vec(), trajectory: vec![], adjoint: vec![] };
    for &freq in frequencies {
        let factor = freq * PROBE_RESOLUTION / base_m;
        let base = base_u.refine(factor)?;
        let fine = base.grid();
        let w = 2.0 * std::f64::consts::PI * freq as f64;
        let mf = fine.intervals() as f64;
        let mut pert = base.clone();
        for l in 0..fine.intervals() {
            let (ta, tb) = (l as f64 / mf, (l + 1) as f64 / mf);
            let mean = mf * ((w * ta).cos() - (w * tb).cos()) / w;
            pert.row_mut(l).iter_mut().for_each(|v| *v += amplitude * mean);
        }
        let x0 = integrate_forward(problem, &measure, &base)?;
        let x1 = integrate_forward(problem, &measure, &pert)?;
        let l0 = integrate_adjoint(problem, &measure, &base, &x0)?;
        let l1 = integrate_adjoint(problem, &measure, &pert, &x1)?;
        result.trajectory.push(sup_dist(x0.raw(), x1.raw()));
        result.adjoint.push(sup_dist(l0.raw(), l1.raw()));
    }
    Ok(result)
}

//! Piecewise-constant controls on an equispaced grid of `[0, 1]`.
//!
//! A control in `U_M` is stored as an `M x k` row-major array: row `l` is the
//! value taken on the `l`-th interval `[l/M, (l+1)/M)`. The `L²` geometry is
//! exact on this subspace since every integrand is piecewise constant.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};

/// Control intervals and integration substeps on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    intervals: usize,
    substeps: usize,
}

impl TimeGrid {
    pub fn new(intervals: usize, substeps: usize) -> Result<Self> {
        if intervals == 0 || substeps == 0 {
            return Err(Error::arg(format!(
                "time grid needs M >= 1 and S >= 1 (got M = {intervals}, S = {substeps})"
            )));
        }
        Ok(Self { intervals, substeps })
    }

    /// Number of control intervals `M`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Integration substeps per interval `S`.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Interval length `1/M`.
    pub fn h(&self) -> f64 {
        1.0 / self.intervals as f64
    }

    /// Substep length `1/(M S)`.
    pub fn dt(&self) -> f64 {
        1.0 / self.total_steps() as f64
    }

    pub fn total_steps(&self) -> usize {
        self.intervals * self.substeps
    }

    /// Number of substep nodes, `M S + 1`.
    pub fn node_count(&self) -> usize {
        self.total_steps() + 1
    }

    /// Time of substep node `m`.
    pub fn node_time(&self, m: usize) -> f64 {
        m as f64 / self.total_steps() as f64
    }

    /// Substep index of interval node `l` (time `l/M`).
    pub fn interval_node(&self, l: usize) -> usize {
        l * self.substeps
    }

    /// Same interval count with a different number of substeps.
    pub fn with_substeps(&self, substeps: usize) -> Result<Self> {
        Self::new(self.intervals, substeps)
    }
}

/// A control `u ∈ U_M` with values in `ℝ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseControl {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl PiecewiseControl {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.intervals() * dim] }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let values = (0..grid.intervals()).flat_map(|_| value.iter().copied()).collect();
        Self { grid, dim: value.len(), values }
    }

    /// Build from a row-major `M x k` buffer.
    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("control dimension must be positive"));
        }
        if values.len() != grid.intervals() * dim {
            return Err(Error::dim(format!(
                "expected {} control values ({} intervals x {dim}), got {}",
                grid.intervals() * dim,
                grid.intervals(),
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    /// Control whose value on interval `l` is `f(l)`.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.intervals() * dim);
        for l in 0..grid.intervals() {
            let row = f(l);
            if row.len() != dim {
                return Err(Error::dim(format!("row {l} has length {}, expected {dim}", row.len())));
            }
            values.extend(row);
        }
        Ok(Self { grid, dim, values })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Control dimension `k`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value `u_l` on interval `l` (zero based).
    pub fn row(&self, l: usize) -> &[f64] {
        &self.values[l * self.dim..(l + 1) * self.dim]
    }

    pub fn row_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.values[l * self.dim..(l + 1) * self.dim]
    }

    /// Interval containing substep `m` (the step from node `m` to `m+1`).
    pub fn row_at_step(&self, m: usize) -> &[f64] {
        self.row(m / self.grid.substeps())
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.grid.intervals() != other.grid.intervals() || self.dim != other.dim {
            return Err(Error::dim(format!(
                "control shapes differ: {}x{} vs {}x{}",
                self.grid.intervals(),
                self.dim,
                other.grid.intervals(),
                other.dim
            )));
        }
        Ok(())
    }

    /// `⟨u, v⟩_{L²} = (1/M) Σ_l ⟨u_l, v_l⟩`.
    pub fn l2_inner(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(s * self.grid.h())
    }

    pub fn norm_l2_sq(&self) -> f64 {
        self.values.iter().map(|a| a * a).sum::<f64>() * self.grid.h()
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_l2_sq().sqrt()
    }

    /// `∫ |u(t)|₁ dt`.
    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|a| a.abs()).sum::<f64>() * self.grid.h()
    }

    /// Largest Euclidean norm over intervals.
    pub fn norm_sup(&self) -> f64 {
        (0..self.grid.intervals())
            .map(|l| self.row(l).iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Rowwise `alpha * u + v`.
    pub fn axpy(alpha: f64, u: &Self, v: &Self) -> Result<Self> {
        u.check_same(v)?;
        let values = u.values.iter().zip(&v.values).map(|(a, b)| alpha * a + b).collect();
        Ok(Self { grid: v.grid, dim: v.dim, values })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { grid: self.grid, dim: self.dim, values: self.values.iter().map(|a| alpha * a).collect() }
    }

    /// Orthogonal projection onto `U_M` of a function sampled at every
    /// substep node (`(M S + 1) x k`, row-major). Interval means use the
    /// composite trapezoid rule on the substep grid.
    pub fn project(samples: &[f64], dim: usize, grid: TimeGrid) -> Result<Self> {
        if dim == 0 || samples.len() != grid.node_count() * dim {
            return Err(Error::dim(format!(
                "projection needs {} x {dim} samples, got {}",
                grid.node_count(),
                samples.len()
            )));
        }
        let s = grid.substeps();
        let mut values = vec![0.0; grid.intervals() * dim];
        for l in 0..grid.intervals() {
            let out = &mut values[l * dim..(l + 1) * dim];
            for m in l * s..(l + 1) * s {
                for i in 0..dim {
                    out[i] += 0.5 * (samples[m * dim + i] + samples[(m + 1) * dim + i]);
                }
            }
            out.iter_mut().for_each(|v| *v /= s as f64);
        }
        Ok(Self { grid, dim, values })
    }

    /// Same control on a grid with `factor` times as many intervals.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        let grid = TimeGrid::new(self.grid.intervals() * factor, self.grid.substeps())?;
        Self::from_fn(grid, self.dim, |l| self.row(l / factor).to_vec())
    }

    /// CSV with header `t,u1,...,uk`, one row per interval left endpoint.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            let _ = write!(out, ",u{i}");
        }
        out.push('\n');
        for l in 0..self.grid.intervals() {
            let _ = write!(out, "{}", l as f64 * self.grid.h());
            for v in self.row(l) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV written by [`to_csv`](Self::to_csv). Lines starting
    /// with `#` are ignored. The row count must equal `grid.intervals()`.
    pub fn from_csv(reader: impl BufRead, grid: TimeGrid) -> Result<Self> {
        let mut dim = None;
        let mut values = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if dim.is_none() {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.first() != Some(&"t") || cols.len() < 2 {
                    return Err(Error::ConfigLine { line: i + 1, msg: "expected header t,u1,...".into() });
                }
                dim = Some(cols.len() - 1);
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::ConfigLine { line: i + 1, msg: e.to_string() })?;
            if Some(fields.len()) != dim {
                return Err(Error::ConfigLine { line: i + 1, msg: "wrong number of columns".into() });
            }
            values.extend(fields);
        }
        let dim = dim.ok_or_else(|| Error::Config("empty control file".into()))?;
        Self::from_values(grid, dim, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(m: usize, s: usize) -> TimeGrid {
        TimeGrid::new(m, s).unwrap()
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(TimeGrid::new(0, 4).is_err());
        assert!(TimeGrid::new(4, 0).is_err());
    }

    #[test]
    fn orthogonal_constants() {
        for m in [1, 3, 16] {
            let u = PiecewiseControl::constant(grid(m, 2), &[1.0, 0.0]);
            let v = PiecewiseControl::constant(grid(m, 2), &[0.0, 1.0]);
            assert_eq!(u.l2_inner(&v).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_norm() {
        let u = PiecewiseControl::constant(grid(7, 1), &[3.0, -4.0]);
        assert_relative_eq!(u.l2_inner(&u).unwrap(), 25.0, max_relative = 1e-14);
    }

    #[test]
    fn two_interval_inner() {
        let g = grid(2, 1);
        let u = PiecewiseControl::from_values(g, 1, vec![1.0, -1.0]).unwrap();
        let v = PiecewiseControl::from_values(g, 1, vec![2.0, 2.0]).unwrap();
        assert_eq!(u.l2_inner(&v).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let u = PiecewiseControl::zeros(grid(2, 1), 1);
        let v = PiecewiseControl::zeros(grid(3, 1), 1);
        assert!(matches!(u.l2_inner(&v), Err(Error::Dimension(_))));
        assert!(PiecewiseControl::axpy(1.0, &u, &v).is_err());
        assert!(PiecewiseControl::from_values(grid(2, 1), 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn axpy_cases() {
        let g = grid(4, 1);
        let u = PiecewiseControl::from_fn(g, 2, |l| vec![l as f64, 1.0]).unwrap();
        let v = PiecewiseControl::from_fn(g, 2, |l| vec![-1.0, l as f64 * 0.5]).unwrap();
        assert_eq!(PiecewiseControl::axpy(0.0, &u, &v).unwrap(), v);
        let zero = PiecewiseControl::zeros(g, 2);
        assert_eq!(PiecewiseControl::axpy(1.0, &u, &zero).unwrap(), u);
        // u_new = u_old - gamma * du
        let stepped = PiecewiseControl::axpy(-0.25, &u, &v).unwrap();
        for l in 0..4 {
            assert_eq!(stepped.row(l)[0], v.row(l)[0] - 0.25 * u.row(l)[0]);
        }
    }

    fn sample(g: TimeGrid, f: impl Fn(f64) -> Vec<f64>) -> Vec<f64> {
        (0..g.node_count()).flat_map(|m| f(g.node_time(m))).collect()
    }

    #[test]
    fn projection_of_constant() {
        let g = grid(5, 3);
        let p = PiecewiseControl::project(&sample(g, |_| vec![1.5, -2.0]), 2, g).unwrap();
        for l in 0..5 {
            assert_relative_eq!(p.row(l)[0], 1.5, max_relative = 1e-15);
            assert_relative_eq!(p.row(l)[1], -2.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn projection_of_sampled_step_function() {
        // Node samples of a step function: the trapezoid rule only mixes in
        // the right neighbour's value at the closing node of each interval.
        let g = grid(4, 8);
        let u = PiecewiseControl::from_fn(g, 1, |l| vec![l as f64 - 1.5]).unwrap();
        let samples: Vec<f64> =
            (0..g.node_count()).map(|m| u.row((m / g.substeps()).min(3))[0]).collect();
        let p = PiecewiseControl::project(&samples, 1, g).unwrap();
        for l in 0..4 {
            let expected = (u.row(l)[0] * 15.0 + u.row((l + 1).min(3))[0]) / 16.0;
            assert_relative_eq!(p.row(l)[0], expected, max_relative = 1e-14);
        }
        // and a constant sample is returned unchanged
        let flat = PiecewiseControl::project(&vec![0.75; g.node_count()], 1, g).unwrap();
        assert_eq!(flat, PiecewiseControl::constant(g, &[0.75]));
    }

    #[test]
    fn projection_of_sine() {
        for s in [4, 16, 64] {
            let g = grid(2, s);
            let f = sample(g, |t| vec![(2.0 * std::f64::consts::PI * t).sin()]);
            let p = PiecewiseControl::project(&f, 1, g).unwrap();
            let exact = 2.0 / std::f64::consts::PI;
            // composite trapezoid error bound (b - a) h^2 max|f''| / 12, times M
            let step = 0.5 / s as f64;
            let bound = 2.0 * 0.5 * step * step * (2.0 * std::f64::consts::PI).powi(2) / 12.0;
            assert!((p.row(0)[0] - exact).abs() <= bound, "S = {s}");
            assert!((p.row(1)[0] + exact).abs() <= bound, "S = {s}");
        }
    }

    #[test]
    fn csv_roundtrip() {
        let g = grid(3, 2);
        let u = PiecewiseControl::from_fn(g, 2, |l| vec![0.1 * l as f64, -1.0 / 3.0]).unwrap();
        let text = u.to_csv();
        assert!(text.starts_with("t,u1,u2\n0,0,"));
        let back = PiecewiseControl::from_csv(text.as_bytes(), g).unwrap();
        assert_eq!(back, u);
    }
}

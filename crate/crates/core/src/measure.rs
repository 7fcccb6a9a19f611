//! Discrete parameter measures `µ_N = Σ α_j δ_{θ_j}` and the centred
//! Beta(4,4) law used by the built-in experiments.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A probability measure with finitely many weighted atoms in `ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    thetas: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Atoms are stored row-major in `thetas` (`len = N * dim`).
    pub fn new(dim: usize, thetas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("parameter dimension must be positive"));
        }
        if weights.is_empty() {
            return Err(Error::arg("a measure needs at least one atom"));
        }
        if thetas.len() != weights.len() * dim {
            return Err(Error::dim(format!(
                "{} weights but {} parameter coordinates for d = {dim}",
                weights.len(),
                thetas.len()
            )));
        }
        if let Some(j) = weights.iter().position(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::arg(format!("weight {j} is not positive: {}", weights[j])));
        }
        if let Some(j) = thetas.iter().position(|t| !t.is_finite()) {
            return Err(Error::arg(format!("atom coordinate {j} is not finite")));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::arg(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, thetas, weights })
    }

    /// Equal weights `1/N` on the given atoms.
    pub fn uniform(dim: usize, thetas: Vec<f64>) -> Result<Self> {
        if dim == 0 || thetas.is_empty() || thetas.len() % dim != 0 {
            return Err(Error::dim(format!("cannot split {} coordinates into d = {dim} atoms", thetas.len())));
        }
        let n = thetas.len() / dim;
        Self::new(dim, thetas, vec![1.0 / n as f64; n])
    }

    pub fn dirac(theta: &[f64]) -> Result<Self> {
        Self::new(theta.len(), theta.to_vec(), vec![1.0])
    }

    /// Convex combination `s·self + (1-s)·other` (atoms concatenated).
    pub fn mix(&self, other: &Self, s: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::dim("cannot mix measures of different dimension"));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::arg(format!("mixing weight must lie in (0, 1), got {s}")));
        }
        let thetas = self.thetas.iter().chain(&other.thetas).copied().collect();
        let weights =
            self.weights.iter().map(|a| a * s).chain(other.weights.iter().map(|a| a * (1.0 - s))).collect();
        Self::new(self.dim, thetas, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// `Σ α_j θ_j^p` for a scalar parameter.
    pub fn moment(&self, p: u32) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::arg("moments are only provided for d = 1"));
        }
        Ok(self.thetas.iter().zip(&self.weights).map(|(t, a)| a * t.powi(p as i32)).sum())
    }

    /// CSV `theta,alpha` (or `theta1,...,thetad,alpha`).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.dim == 1 {
            out.push_str("theta,alpha\n");
        } else {
            for i in 1..=self.dim {
                let _ = write!(out, "theta{i},");
            }
            out.push_str("alpha\n");
        }
        for j in 0..self.len() {
            for t in self.theta(j) {
                let _ = write!(out, "{t},");
            }
            let _ = writeln!(out, "{}", self.weights[j]);
        }
        out
    }

    pub fn from_csv(reader: impl BufRead) -> Result<Self> {
        let mut dim = None;
        let mut thetas = Vec::new();
        let mut weights = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            match dim {
                None => {
                    if cols.last() != Some(&"alpha") || cols.len() < 2 {
                        return Err(Error::ConfigLine { line: i + 1, msg: "expected header theta,alpha".into() });
                    }
                    dim = Some(cols.len() - 1);
                }
                Some(d) => {
                    if cols.len() != d + 1 {
                        return Err(Error::ConfigLine { line: i + 1, msg: "wrong number of columns".into() });
                    }
                    let vals: Vec<f64> = cols
                        .iter()
                        .map(|c| c.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::ConfigLine { line: i + 1, msg: e.to_string() })?;
                    thetas.extend_from_slice(&vals[..d]);
                    weights.push(vals[d]);
                }
            }
        }
        Self::new(dim.unwrap_or(1), thetas, weights)
    }
}

/// Neumaier summation; naive summation of 10⁵ equal weights already drifts
/// by about 1e-12.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Beta(4,4) on `[0,1]` shifted by `-1/2`, supported on `[-1/2, 1/2]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Beta44Law;

impl Beta44Law {
    pub const LO: f64 = -0.5;
    pub const HI: f64 = 0.5;

    /// Density of the shifted law at `theta`.
    pub fn density(&self, theta: f64) -> f64 {
        let x = theta + 0.5;
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        140.0 * (x * (1.0 - x)).powi(3)
    }

    /// Exact moment `E[θ^p]` of the shifted law.
    pub fn moment(&self, p: u32) -> f64 {
        // E[X^i] = Π_{r<i} (4 + r) / (8 + r), then expand (X - 1/2)^p.
        let raw = |i: u32| (0..i).map(|r| (4.0 + r as f64) / (8.0 + r as f64)).product::<f64>();
        let mut binom = 1.0;
        let mut total = 0.0;
        for i in 0..=p {
            total += binom * raw(i) * (-0.5f64).powi((p - i) as i32);
            binom = binom * (p - i) as f64 / (i + 1) as f64;
        }
        total
    }

    /// `N` iid draws, each with weight `1/N`. Draws are `G₁/(G₁+G₂) - 1/2`
    /// where each `G` is a sum of four `Exp(1)` variables obtained as
    /// `-ln U` from a ChaCha8 stream seeded with `seed`.
    pub fn sample_empirical(&self, n: usize, seed: u64) -> Result<DiscreteMeasure> {
        if n == 0 {
            return Err(Error::arg("empirical measure needs N >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gamma4 = || -> f64 {
            (0..4)
                .map(|_| {
                    // gen() is in [0, 1); 1 - U is in (0, 1], so ln is finite.
                    let u: f64 = rng.gen();
                    -(1.0 - u).ln()
                })
                .sum()
        };
        let thetas = (0..n)
            .map(|_| {
                let g1 = gamma4();
                let g2 = gamma4();
                g1 / (g1 + g2) - 0.5
            })
            .collect();
        DiscreteMeasure::uniform(1, thetas)
    }

    /// Equal-weight atoms at the `(j - 1/2)/N` quantiles.
    pub fn quantile_quadrature(&self, n: usize) -> Result<DiscreteMeasure> {
        if n == 0 {
            return Err(Error::arg("quantile measure needs N >= 1"));
        }
        let mut thetas: Vec<f64> =
            (0..n).map(|j| beta44_quantile((j as f64 + 0.5) / n as f64) - 0.5).collect();
        // Enforce exact mirror symmetry; bisection from both tails may differ
        // in the last bit.
        for j in 0..n / 2 {
            let t = 0.5 * (thetas[n - 1 - j] - thetas[j]);
            thetas[j] = -t;
            thetas[n - 1 - j] = t;
        }
        if n % 2 == 1 {
            thetas[n / 2] = 0.0;
        }
        DiscreteMeasure::uniform(1, thetas)
    }
}

/// Regularized incomplete beta `I_x(4,4) = Σ_{j=4}^{7} C(7,j) x^j (1-x)^{7-j}`.
pub fn beta44_cdf(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::arg(format!("beta44_cdf needs x in [0, 1], got {x}")));
    }
    Ok(beta44_cdf_unchecked(x))
}

fn beta44_cdf_unchecked(x: f64) -> f64 {
    const C7: [f64; 8] = [1.0, 7.0, 21.0, 35.0, 35.0, 21.0, 7.0, 1.0];
    let y = 1.0 - x;
    (4..=7).map(|j| C7[j] * x.powi(j as i32) * y.powi(7 - j as i32)).sum()
}

/// Inverse of [`beta44_cdf`] by bisection to absolute tolerance `1e-12`.
pub fn beta44_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if beta44_cdf_unchecked(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

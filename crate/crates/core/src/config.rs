//! Run configuration.
//!
//! A config is a TOML file of `[section]` headers and `key = value` lines.
//! Unknown keys are rejected and every error carries the line it refers to.
//! The fully resolved config (defaults filled in, overrides applied) is what
//! gets recorded next to every output, so it reproduces a run exactly.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{PiecewiseControl, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{Beta44Law, DiscreteMeasure};
use crate::optim::{Method, OptimizerConfig};
use crate::problem::{builtin_problem, EnsembleProblem, ProblemParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// `linear2d`, `generic-lti` or `logistic1d`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureSection {
    /// `empirical`, `quantile` or `explicit`.
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thetas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for MeasureSection {
    fn default() -> Self {
        Self { kind: "quantile".into(), n: 20, seed: 1, thetas: None, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationSection {
    pub m: usize,
    pub s: usize,
}

impl Default for DiscretizationSection {
    fn default() -> Self {
        Self { m: 32, s: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub beta: f64,
    #[serde(default = "defaults::method")]
    pub method: String,
    #[serde(default = "defaults::gamma0")]
    pub gamma0: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::c")]
    pub c: f64,
    #[serde(default = "defaults::max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default = "defaults::yes")]
    pub correction: bool,
    #[serde(default = "defaults::validation_n")]
    pub validation_n: usize,
    #[serde(default = "defaults::validation_seed")]
    pub validation_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    /// Constant control value, one entry per control channel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<Vec<f64>>,
    /// CSV file with header `t,u1,..,uk` and one row per interval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n_list: Vec<usize>,
    /// Reference size; the largest entry of `n_list` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_n: Option<usize>,
    /// Seeds for empirical measures.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_list: vec![10, 30, 100, 300], reference_n: None, seeds: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub full_grid: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into(), full_grid: false }
    }
}

mod defaults {
    pub fn method() -> String {
        "grad".into()
    }
    pub fn gamma0() -> f64 {
        1.0
    }
    pub fn tau() -> f64 {
        0.5
    }
    pub fn c() -> f64 {
        1e-4
    }
    pub fn max_iter() -> usize {
        2000
    }
    pub fn yes() -> bool {
        true
    }
    pub fn validation_n() -> usize {
        20
    }
    pub fn validation_seed() -> u64 {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub measure: MeasureSection,
    #[serde(default)]
    pub discretization: DiscretizationSection,
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Text the config was parsed from, for locating keys in errors.
    #[serde(skip)]
    source: Option<String>,
}

fn line_at(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]`, or of the section header itself.
fn locate(src: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(key) = key {
                let lhs = line.split('=').next().unwrap_or("").trim();
                if lhs == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

impl RunConfig {
    /// Parse and validate.
    pub fn parse(src: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(src).map_err(|e| match e.span() {
            Some(span) => Error::ConfigLine { line: line_at(src, span.start), msg: e.message().to_string() },
            None => Error::Config(e.message().to_string()),
        })?;
        cfg.source = Some(src.to_string());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&src)
    }

    fn fail(&self, section: &str, key: Option<&str>, msg: impl Into<String>) -> Error {
        let msg = match key {
            Some(k) => format!("[{section}] {k}: {}", msg.into()),
            None => format!("[{section}]: {}", msg.into()),
        };
        match self.source.as_deref().and_then(|s| locate(s, section, key)) {
            Some(line) => Error::ConfigLine { line, msg },
            None => Error::Config(msg),
        }
    }

    /// Check every value the modules would reject, without running anything
    /// expensive.
    pub fn validate(&self) -> Result<()> {
        let d = &self.discretization;
        if d.m == 0 {
            return Err(self.fail("discretization", Some("m"), "must be at least 1"));
        }
        if d.s == 0 {
            return Err(self.fail("discretization", Some("s"), "must be at least 1"));
        }
        let o = &self.optimize;
        if !(o.beta > 0.0 && o.beta.is_finite()) {
            return Err(self.fail("optimize", Some("beta"), format!("must be positive, got {}", o.beta)));
        }
        o.method.parse::<Method>().map_err(|e| self.fail("optimize", Some("method"), e.to_string()))?;
        let checks: [(&str, bool); 4] = [
            ("gamma0", o.gamma0 > 0.0 && o.gamma0.is_finite()),
            ("tau", o.tau > 0.0 && o.tau < 1.0),
            ("c", o.c > 0.0 && o.c < 1.0),
            ("grad_tol", o.grad_tol >= 0.0 && o.grad_tol.is_finite()),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(self.fail("optimize", Some(key), "out of range"));
            }
        }
        if o.validation_n == 0 {
            return Err(self.fail("optimize", Some("validation_n"), "must be at least 1"));
        }
        let problem = self.problem().map_err(|e| self.fail("problem", None, e.to_string()))?;
        if problem.param_dim() != 1 {
            return Err(self.fail("problem", None, "only scalar parameters are supported by the config"));
        }
        let m = &self.measure;
        match m.kind.as_str() {
            "empirical" | "quantile" => {
                if m.n == 0 {
                    return Err(self.fail("measure", Some("n"), "must be at least 1"));
                }
                if m.thetas.is_some() || m.weights.is_some() {
                    return Err(self.fail("measure", Some("thetas"), "only allowed with kind = \"explicit\""));
                }
            }
            "explicit" => {
                if m.thetas.as_ref().is_none_or(|t| t.is_empty()) {
                    return Err(self.fail("measure", Some("thetas"), "explicit measures need atoms"));
                }
            }
            other => {
                return Err(self.fail(
                    "measure",
                    Some("kind"),
                    format!("unknown kind `{other}` (expected empirical, quantile or explicit)"),
                ))
            }
        }
        self.measure().map_err(|e| self.fail("measure", None, e.to_string()))?;
        let s = &self.sweep;
        if s.n_list.is_empty() || s.n_list.contains(&0) {
            return Err(self.fail("sweep", Some("n_list"), "needs positive sizes"));
        }
        if s.reference_n == Some(0) {
            return Err(self.fail("sweep", Some("reference_n"), "must be at least 1"));
        }
        if s.seeds.is_empty() {
            return Err(self.fail("sweep", Some("seeds"), "needs at least one seed"));
        }
        if self.output.dir.is_empty() {
            return Err(self.fail("output", Some("dir"), "must not be empty"));
        }
        if self.control.constant.is_some() && self.control.file.is_some() {
            return Err(self.fail("control", Some("file"), "give either constant or file, not both"));
        }
        self.initial_control().map_err(|e| {
            let key = if self.control.file.is_some() { "file" } else { "constant" };
            self.fail("control", Some(key), e.to_string())
        })?;
        Ok(())
    }

    pub fn problem(&self) -> Result<Box<dyn EnsembleProblem>> {
        let p = &self.problem;
        let lti = match (p.n, p.k, &p.a0, &p.a1, &p.b0, &p.b1) {
            (None, None, None, None, None, None) => None,
            (Some(n), Some(k), Some(a0), a1, Some(b0), b1) => Some((
                n,
                k,
                a0.clone(),
                a1.clone().unwrap_or_else(|| vec![0.0; n * n]),
                b0.clone(),
                b1.clone().unwrap_or_else(|| vec![0.0; n * k]),
            )),
            _ => return Err(Error::arg("generic-lti needs n, k, a0 and b0 (a1, b1 default to zero)")),
        };
        if lti.is_some() && p.name != "generic-lti" {
            return Err(Error::arg(format!("matrix keys are only read by generic-lti, not {}", p.name)));
        }
        builtin_problem(&p.name, &ProblemParams { target: p.target.clone(), x0: p.x0.clone(), lti })
    }

    pub fn measure(&self) -> Result<DiscreteMeasure> {
        let m = &self.measure;
        match m.kind.as_str() {
            "empirical" => Beta44Law.sample_empirical(m.n, m.seed),
            "quantile" => Beta44Law.quantile_quadrature(m.n),
            "explicit" => {
                let thetas = m.thetas.clone().unwrap_or_default();
                match &m.weights {
                    Some(w) => DiscreteMeasure::new(1, thetas, w.clone()),
                    None => DiscreteMeasure::uniform(1, thetas),
                }
            }
            other => Err(Error::arg(format!("unknown measure kind `{other}`"))),
        }
    }

    /// Fresh empirical sample used to test a computed control.
    pub fn validation_measure(&self) -> Result<DiscreteMeasure> {
        Beta44Law.sample_empirical(self.optimize.validation_n, self.optimize.validation_seed)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.discretization.m, self.discretization.s)
    }

    pub fn method(&self) -> Result<Method> {
        self.optimize.method.parse()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let o = &self.optimize;
        OptimizerConfig {
            gamma0: o.gamma0,
            tau: o.tau,
            c: o.c,
            max_iter: o.max_iter,
            grad_tol: o.grad_tol,
            correction: o.correction,
        }
    }

    /// Starting control for `optimize`, or the applied control for `simulate`.
    pub fn initial_control(&self) -> Result<PiecewiseControl> {
        let grid = self.grid()?;
        let k = self.problem()?.control_dim();
        if let Some(path) = &self.control.file {
            let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot read control file {path}: {e}")))?;
            let u = PiecewiseControl::from_csv(BufReader::new(f), grid)?;
            if u.dim() != k {
                return Err(Error::dim(format!("control file has {} channels, problem has {k}", u.dim())));
            }
            return Ok(u);
        }
        match &self.control.constant {
            Some(c) if c.len() != k => Err(Error::dim(format!("constant control has {} entries, expected {k}", c.len()))),
            Some(c) => Ok(PiecewiseControl::constant(grid, c)),
            None => Ok(PiecewiseControl::zeros(grid, k)),
        }
    }

    /// The resolved config as TOML; parsing it back gives an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One-line comment recording the resolved config.
    pub fn header_line(&self) -> String {
        format!("# config: {}", serde_json::to_string(self).expect("config serializes"))
    }
}

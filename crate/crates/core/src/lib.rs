//! Ensemble optimal control for parametrized affine-control systems.
//!
//! A single control `u ∈ L²([0,1], ℝ^k)` drives every member of the family
//! `ẋ = F₀(x,θ) + F(x,θ)u`, and the cost averages a terminal penalty over a
//! discrete parameter measure plus an `L²` regularizer. The crate provides
//! the forward/adjoint machinery, the discretized gradient, two minimization
//! schemes (projected gradient and iterative maximum principle), and an exact
//! solver for linear ensembles with quadratic terminal cost that serves as
//! ground truth.

pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod gradient;
pub mod integrator;
pub mod lq;
pub mod measure;
pub mod objective;
pub mod optim;
mod par;
pub mod problem;

pub use control::{PiecewiseControl, TimeGrid};
pub use error::{Error, Result};
pub use measure::{Beta44Law, DiscreteMeasure};
pub use optim::{Method, OptimizerConfig, RunTrace};
pub use problem::EnsembleProblem;

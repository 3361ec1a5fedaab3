//! Numerical solution of Type-II backward stochastic Volterra integral equations
//!
//! ```text
//! Y(t) = psi(t, X(t), X(T)) + int_t^T g(t, s, X(t), X(s), Y(s), Z(t,s), Z(s,t)) ds
//!        - int_t^T Z(t,s) dW(s)
//! ```
//!
//! by the explicit backward Euler-Maruyama scheme on a two-parameter grid, with
//! conditional expectations realized either exactly on a binary tree or by
//! least-squares Monte Carlo regression. The crate also provides the
//! intermediate BSDE-system approximation, error and regularity functionals,
//! checkers for the discrete and continuous Gronwall inequalities, and CSV/JSON
//! reporting.
//!
//! Every numerical type is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases fix `f64`.

pub mod analysis;
pub mod bsde_sys;
pub mod condexp;
pub mod error;
pub mod forward;
pub mod mesh;
pub mod model;
pub mod noise;
pub mod report;
pub mod scalar;
pub mod scheme;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TimeMesh64 = mesh::TimeMesh<f64>;
pub type IncrementBatch64 = noise::IncrementBatch<f64>;
pub type PathBatch64 = noise::PathBatch<f64>;
pub type TreeEnsemble64 = noise::TreeEnsemble<f64>;
pub type ProblemInstance64 = model::ProblemInstance<f64>;
pub type StatePaths64 = forward::StatePaths<f64>;
pub type SchemeSolution64 = scheme::SchemeSolution<f64>;
pub type BsdeSystemSolution64 = bsde_sys::BsdeSystemSolution<f64>;

//! Numerical toolkit for linear stochastic control systems
//!
//! ```text
//! dx = (A x + B u) dt + sum_i (C_i x + D_i u) dw_i
//! ```
//!
//! covering mean-square stability through the second-moment lift, the
//! stochastic algebraic Riccati equation, the dual backward equation on
//! discrete noise trees, δ-observability constants, Gramian-based null
//! controls, and a stabilizer built from concatenated null controls.
//!
//! Loops that fan out (basis solves, Monte Carlo paths, gain restarts,
//! experiment grids) take an [`Execution`] policy. With the default
//! `parallel` feature they run on rayon; results are always collected in
//! index order so both policies give identical numbers.

pub mod budget;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod moment;
pub mod null_control;
pub mod observability;
pub mod riccati;
pub mod stabilizer;
pub mod tree;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{HorizonConfig, StochasticSystem};

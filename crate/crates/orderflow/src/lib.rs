//! Order-preserving GFlowNet samplers over discrete DAG-structured MDPs.
//!
//! The crate trains sequential samplers whose terminal distribution follows a
//! *learned* reward that only has to respect a (partial) order on candidates:
//! total order for single-objective maximization, Pareto order for
//! multi-objective problems. It ships:
//!
//! - [`env`]: hypergrid and prepend/append sequence environments with their
//!   objective functions (plateau grid, cosine landscape, branin/currin/
//!   shubert/beale, bag multisets, n-gram counts);
//! - [`autodiff`]: a small reverse-mode tape over a flat parameter store,
//!   feedforward and tabular parametrizations, and Adam;
//! - [`loss`]: flow-matching / detailed-balance / trajectory-balance /
//!   sub-trajectory-balance losses, the order-preserving criterion in batch
//!   and pairwise form, and backward-KL regularization;
//! - [`train`]: the online/off-policy training loop with replay, prioritized
//!   replay, backward trajectory augmentation and reward-ranked boosting;
//! - [`metrics`]: Pareto front extraction and the indicator suite (GD, IGD,
//!   GD+, IGD+, averaged Hausdorff, hypervolume, PC-entropy, R2) plus
//!   exploration diagnostics;
//! - [`theory`]: closed-form solutions for the order-preserving loss on
//!   ranked chains and their numeric / enumeration oracles.
//!
//! The `examples/` directory carries one runnable example per capability;
//! the `orderflow` binary exposes the same functionality as subcommands
//! (`train`, `eval-moo`, `diagnose`, `oracle`, `compare`, `sample`).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod runner;
pub mod theory;
pub mod train;

pub use error::{Error, Result};

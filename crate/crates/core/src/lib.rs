//! Constrained actor-critic dispatch for multi-period AC optimal power flow
//! with battery storage.
//!
//! The crate bundles the pieces needed to train and evaluate a
//! primal-dual TD3 agent on IEEE test networks:
//!
//! * [`grid`] and [`powerflow`]: network data and the Newton-Raphson AC solve;
//! * [`env`]: the dispatch environment with battery state-of-charge dynamics;
//! * [`autodiff`] and [`nets`]: a small reverse-mode autodiff engine and the
//!   complex graph-convolutional actor, voltage predictor and twin critics;
//! * [`trainer`]: replay, critic regression, augmented-Lagrangian actor loss,
//!   dual ascent and the baseline trainers;
//! * [`oracle`]: a perfect-foresight multi-period OPF used for optimal gaps.

pub mod autodiff;
pub mod env;
pub mod exec;
pub mod gradsuite;
pub mod grid;
pub mod nets;
pub mod oracle;
pub mod powerflow;
pub mod trainer;

pub use grid::{load_case, GridCase};

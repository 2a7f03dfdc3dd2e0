//! Deterministic client-edge-cloud federated learning simulator with sparse
//! hierarchical personalization, baselines, non-IID partitioning,
//! communication accounting and numerical checks of the convergence theory.

pub mod comms;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod math;
pub mod models;
pub mod rng;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
pub use math::ParamVector;

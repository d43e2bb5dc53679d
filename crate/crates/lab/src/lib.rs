//! File formats, training loop and experiment harness built on `afl-core`.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod modelio;
pub mod trainer;
pub mod volio;

pub use error::{LabError, Result};

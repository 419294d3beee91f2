//! Two-stage dual method for constrained multi-objective serving problems.

pub mod dag;
pub mod error;
pub mod generate;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod recovery;
pub mod solver;
pub mod variance;

pub use error::{Error, Result};

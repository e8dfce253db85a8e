//! Distributionally robust explanations: training small predictors whose
//! gradient explanations stay consistent across data environments, with
//! synthetic multi-environment data and explanation robustness metrics.

pub mod envdata;
pub mod error;
pub mod explain;
mod format;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod report;
pub mod trainer;

pub use dre_autograd as autograd;
pub use error::{DreError, Result};

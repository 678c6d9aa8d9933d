//! Continual learning for hybrid CTC/attention sequence models with
//! task-specific adapters.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod inference;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};

//! Clinical-utility evaluation of EHR-based cancer risk models.

pub mod attribution;
pub mod cohort;
pub mod error;
pub mod event_store;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod learners;
pub mod pipeline;
pub mod risk_factors;
pub mod synth;

pub use error::{Error, Result};

//! Session-based next-item recommendation with recurrent networks over
//! item sequences (IT-RNN) and item plus dwell-time sequences (DT-RNN).

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod numeric;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};

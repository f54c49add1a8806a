pub mod annotations;
pub mod config;
pub mod dsp;
pub mod error;
pub mod features;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod plot;
pub mod postprocess;
pub mod scalar;
pub mod training;
pub mod variants;

pub use error::{Error, Result};

pub mod autodiff;
pub mod bitstream;
pub mod branch;
pub mod cascade;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod rvq;
pub mod signal;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use signal::AudioBuffer;

pub mod critics;
pub mod data;
pub mod decode;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

pub mod data;
pub mod error;
pub mod network;
pub mod neuron;
pub mod profiler;
pub mod quality;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

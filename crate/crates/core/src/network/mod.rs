//! The spiking encoder-decoder.
//!
//! Each encoder stage is `conv → LIF → conv → LIF → pool`, with the second
//! LIF's spikes kept for the skip connection. The bottleneck is two
//! `conv → LIF` pairs at twice the deepest stage's width. Each decoder stage is
//! `deconv → LIF → concat(upsampled, skip) → conv → LIF → conv → LIF`, so both
//! concatenated operands are spike maps. A final 3×3 convolution feeds a
//! non-firing LIF layer whose membrane potential after the last timestep is
//! the enhanced image.

pub mod checkpoint;
mod config;
mod forward;
mod graph;

pub use config::{NetworkConfig, IMAGE_CHANNELS, SUPPORTED_DEPTHS};
pub use forward::{direct_code, ForwardOptions, ForwardOutput, LayerSpikes, SpikeTrace, Tape, TapeNode};
pub use graph::{ConvLayer, LayerGraph, NodeDesc, NodeId, Op};

pub(crate) use forward::{Saved, Value};

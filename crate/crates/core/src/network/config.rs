use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::LifConfig;

/// Depths accepted for full networks.
pub const SUPPORTED_DEPTHS: [usize; 3] = [3, 4, 5];

/// Input channels; images are RGB.
pub const IMAGE_CHANNELS: usize = 3;

/// Shape and neuron settings of one encoder-decoder network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of encoder (and decoder) stages.
    pub depth: usize,
    /// Channels of the first encoder stage; doubled at every stage below it.
    pub base_channels: usize,
    /// Simulation steps per image.
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub lif: LifConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 4,
            base_channels: 64,
            timesteps: 5,
            height: 64,
            width: 64,
            lif: LifConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// The full-resolution configuration: depth 4, 64 base channels, T = 5, 512×512.
    pub fn full_scale() -> Self {
        NetworkConfig {
            height: 512,
            width: 512,
            ..Default::default()
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (IMAGE_CHANNELS, self.height, self.width)
    }

    /// Channels at encoder stage `i`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// Every violated invariant, including the supported-depth range.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !SUPPORTED_DEPTHS.contains(&self.depth) {
            out.push(format!("network.depth must be one of {SUPPORTED_DEPTHS:?}, got {}", self.depth));
        }
        out.extend(self.structural_problems());
        out
    }

    /// Invariants needed for the graph to be well formed at any depth.
    pub fn structural_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.depth == 0 || self.depth > 8 {
            out.push(format!("network.depth must lie in 1..=8, got {}", self.depth));
        }
        if self.base_channels == 0 {
            out.push("network.base_channels must be >= 1".to_string());
        }
        if self.timesteps == 0 {
            out.push("network.timesteps must be >= 1".to_string());
        }
        if self.depth <= 8 {
            let m = 1usize << self.depth;
            for (name, v) in [("height", self.height), ("width", self.width)] {
                if v == 0 || v % m != 0 {
                    out.push(format!("network.{name} must be a positive multiple of 2^depth = {m}, got {v}"));
                }
            }
        }
        out.extend(self.lif.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        join(self.problems())
    }

    pub fn validate_structure(&self) -> Result<()> {
        join(self.structural_problems())
    }
}

fn join(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

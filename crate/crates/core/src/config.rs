//! Shared TOML configuration.
//!
//! ```toml
//! [data]
//! beyond_threshold = 5
//!
//! [network]
//! input_size = 64
//! channels = [16, 32, 32]
//! strides = [2, 2, 1]
//!
//! [train]
//! head_lr = 0.01
//!
//! [synth]
//! num_images = 200
//!
//! [score]
//! gamma = 1.0
//! ```
//!
//! Every key is optional; missing keys take their defaults. Command-line
//! flags are applied on top of the file by the caller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::DEFAULT_BEYOND_THRESHOLD;
use crate::error::{Error, Result};
use crate::network::{BackboneConfig, HeadConfig, NetworkConfig};
use crate::segscore::{ScoreWeights, DEFAULT_BACKGROUND_QUANTILE, DEFAULT_RESPONSE_SIGMA};
use crate::synthdata::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// First count mapped to the beyond label.
    pub beyond_threshold: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            beyond_threshold: DEFAULT_BEYOND_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub channel_factor: f64,
    pub peak_radius: usize,
    pub density_scale: f32,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let head = HeadConfig::new(1);
        Self {
            input_size: 64,
            channels: bb.channels,
            strides: bb.strides,
            kernel: bb.kernel,
            channel_factor: head.channel_factor,
            peak_radius: head.peak_radius,
            density_scale: head.density_scale,
        }
    }
}

impl NetworkSection {
    pub fn build(&self, num_categories: usize) -> NetworkConfig {
        NetworkConfig {
            head: HeadConfig {
                num_categories,
                channel_factor: self.channel_factor,
                peak_radius: self.peak_radius,
                density_scale: self.density_scale,
            },
            backbone: BackboneConfig {
                channels: self.channels.clone(),
                strides: self.strides.clone(),
                kernel: self.kernel,
            },
            input_height: self.input_size,
            input_width: self.input_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub background_quantile: f64,
    pub response_sigma: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        let w = ScoreWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            background_quantile: DEFAULT_BACKGROUND_QUANTILE,
            response_sigma: DEFAULT_RESPONSE_SIGMA,
        }
    }
}

impl ScoreConfig {
    pub fn weights(&self) -> ScoreWeights {
        ScoreWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                p.push(format!("score.{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.background_quantile) {
            p.push(format!(
                "score.background_quantile must lie in [0, 1], got {}",
                self.background_quantile
            ));
        }
        if !(self.response_sigma.is_finite() && self.response_sigma > 0.0) {
            p.push(format!("score.response_sigma must be positive, got {}", self.response_sigma));
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub score: ScoreConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(lines) => Error::Config(lines.into_iter().map(|l| format!("{}: {l}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    /// Every problem across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.data.beyond_threshold < 2 {
            p.push(format!(
                "data.beyond_threshold must be at least 2, got {}",
                self.data.beyond_threshold
            ));
        }
        if let Err(Error::Config(lines)) = self.network.build(1).validate() {
            p.extend(lines.into_iter().map(|l| format!("network: {l}")));
        }
        p.extend(self.train.problems());
        p.extend(self.synth.problems());
        p.extend(self.score.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

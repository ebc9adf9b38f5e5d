use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::MelConfig;
use crate::error::{Error, Result};
use crate::network::{dilation_cycle, validate_dilations, width_dilations, DilationCheck, NetShape};
use crate::signal::{Permutation, PermutationKind};

/// How rows are permuted between flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationStrategy {
    /// Identity for one flow, `reverse_then_bipartite` for eight, `reverse`
    /// otherwise.
    Auto,
    /// Reverse after every flow.
    Reverse,
    /// Reverse for the first half of the flows, bipartite reverse after.
    ReverseThenBipartite,
    Identity,
}

impl PermutationStrategy {
    pub fn kinds(self, n_flows: usize) -> Vec<PermutationKind> {
        let s = match self {
            PermutationStrategy::Auto if n_flows == 1 => PermutationStrategy::Identity,
            PermutationStrategy::Auto if n_flows == 8 => PermutationStrategy::ReverseThenBipartite,
            PermutationStrategy::Auto => PermutationStrategy::Reverse,
            s => s,
        };
        (0..n_flows)
            .map(|k| match s {
                PermutationStrategy::Identity => PermutationKind::Identity,
                PermutationStrategy::ReverseThenBipartite if k >= n_flows / 2 => PermutationKind::BipartiteReverse,
                _ => PermutationKind::Reverse,
            })
            .collect()
    }
}

fn default_layers() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_strategy() -> PermutationStrategy {
    PermutationStrategy::Auto
}
fn default_sample_rate() -> u32 {
    22050
}
fn default_init_std() -> f64 {
    0.05
}

/// Model hyperparameters. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub h: usize,
    pub n_flows: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub residual_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_h: usize,
    #[serde(default = "default_kernel")]
    pub kernel_w: usize,
    /// Defaults to the smallest doubling cycle covering `h`.
    #[serde(default)]
    pub dilations_h: Option<Vec<usize>>,
    /// Defaults to `[1, 2, 4, …, 128]` repeated.
    #[serde(default)]
    pub dilations_w: Option<Vec<usize>>,
    #[serde(default = "default_strategy")]
    pub permutation: PermutationStrategy,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Mel conditioning; `None` for an unconditioned model.
    #[serde(default)]
    pub mel: Option<MelConfig>,
}

pub const PRESET_NAMES: [&str; 6] = [
    "wf-h8-c64",
    "wf-h16-c64",
    "wf-h32-c64",
    "wf-h64-c64",
    "wf-h16-c128",
    "wf-h16-c256",
];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "wf-h8-c64" => include_str!("../../presets/wf-h8-c64.json"),
        "wf-h16-c64" => include_str!("../../presets/wf-h16-c64.json"),
        "wf-h32-c64" => include_str!("../../presets/wf-h32-c64.json"),
        "wf-h64-c64" => include_str!("../../presets/wf-h64-c64.json"),
        "wf-h16-c128" => include_str!("../../presets/wf-h16-c128.json"),
        "wf-h16-c256" => include_str!("../../presets/wf-h16-c256.json"),
        _ => return None,
    })
}

impl ModelConfig {
    /// Small unconditioned configuration, handy for tests.
    pub fn unconditioned(h: usize, n_flows: usize, n_layers: usize, residual_channels: usize) -> Self {
        Self {
            h,
            n_flows,
            n_layers,
            residual_channels,
            kernel_h: 3,
            kernel_w: 3,
            dilations_h: None,
            dilations_w: None,
            permutation: PermutationStrategy::Auto,
            sample_rate: default_sample_rate(),
            init_std: default_init_std(),
            mel: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name).ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
        Self::from_json(src)
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dilations_h(&self) -> Result<Vec<usize>> {
        match &self.dilations_h {
            Some(d) => Ok(d.clone()),
            None => dilation_cycle(self.h, self.n_layers, self.kernel_h),
        }
    }

    pub fn dilations_w(&self) -> Vec<usize> {
        self.dilations_w.clone().unwrap_or_else(|| width_dilations(self.n_layers))
    }

    pub fn cond_channels(&self) -> Option<usize> {
        self.mel.as_ref().map(|m| m.n_mels)
    }

    pub fn net_shape(&self) -> Result<NetShape> {
        Ok(NetShape {
            residual_channels: self.residual_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            dilations_h: self.dilations_h()?,
            dilations_w: self.dilations_w(),
            cond_channels: self.cond_channels(),
        })
    }

    pub fn permutations(&self) -> Vec<Permutation> {
        self.permutation
            .kinds(self.n_flows)
            .into_iter()
            .map(|k| Permutation::new(k, self.h))
            .collect()
    }

    /// Height receptive-field check; a warning does not make the config
    /// invalid.
    pub fn dilation_check(&self) -> Result<DilationCheck> {
        Ok(validate_dilations(self.h, self.kernel_h, &self.dilations_h()?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(Error::InvalidConfig("h must be at least 1".into()));
        }
        if self.n_flows < 1 {
            return Err(Error::InvalidConfig("n_flows must be at least 1".into()));
        }
        if self.n_layers < 1 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        for (axis, d) in [("height", self.dilations_h()?), ("width", self.dilations_w())] {
            if d.len() != self.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "{axis} dilation cycle has {} entries for {} layers",
                    d.len(),
                    self.n_layers
                )));
            }
        }
        if let Some(m) = &self.mel {
            m.validate()?;
        }
        self.net_shape()?.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Loads a config file, or a named preset when `name_or_path` is one.
pub fn load_config(name_or_path: &str) -> Result<ModelConfig> {
    if preset_source(name_or_path).is_some() {
        return ModelConfig::preset(name_or_path);
    }
    ModelConfig::load(name_or_path)
}

//! Pipeline configuration file. Every field is optional; command-line flags
//! take precedence, then the file, then built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use thermoforge::heatfd::{SolverKind, TargetField};

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub geometry: GeometrySection,
    pub thermal: ThermalSection,
    pub vrrae: VrraeSection,
    pub deeponet: DeepOnetSection,
    pub cnn: CnnSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub count: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub shape_size: Option<usize>,
    pub margin: Option<usize>,
    pub allow_overlap: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalSection {
    /// `default` (100 °C edges) or `paper-alt` (20 °C edges).
    pub preset: Option<String>,
    pub t_outer: Option<f64>,
    pub t_hole: Option<f64>,
    pub target: Option<TargetField>,
    pub solver: Option<SolverKind>,
    pub tol: Option<f64>,
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VrraeSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta_final: Option<f64>,
    pub anneal_fraction: Option<f64>,
    pub latent_dim: Option<usize>,
    pub k_star: Option<usize>,
    pub encoder_channels: Option<Vec<usize>>,
    pub decoder_channels: Option<Vec<usize>>,
    pub seed_channels: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepOnetSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub branch_hidden: Option<Vec<usize>>,
    pub trunk_hidden: Option<Vec<usize>>,
    pub p: Option<usize>,
    pub output_bias: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub decoder_channels: Option<Vec<usize>>,
    pub seed_channels: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pairs: Option<usize>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// First present value wins.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

/// SHA-256 of the canonical JSON of an effective configuration.
pub fn config_hash<T: Serialize>(effective: &T) -> String {
    thermoforge::sha256_hex(&serde_json::to_vec(effective).expect("config serializes"))
}

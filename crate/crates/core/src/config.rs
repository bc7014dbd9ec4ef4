//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnddConfig {
    pub enabled: bool,
    pub lambda: f64,
    /// Noise stream seed; falls back to the experiment seed.
    pub seed: Option<u64>,
}

impl Default for GnddConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 1.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DfcConfig {
    pub enabled: bool,
}

impl Default for DfcConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GamConfig {
    pub raw_gates: bool,
    pub reduction: usize,
}

impl Default for GamConfig {
    fn default() -> Self {
        Self {
            raw_gates: false,
            reduction: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdfConfig {
    pub enabled: bool,
    pub bins: usize,
    pub mi_weight: f64,
    pub mi_channels: usize,
    pub gam: GamConfig,
}

impl Default for FdfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bins: 32,
            mi_weight: 1.0,
            mi_channels: 128,
            gam: GamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the four stride-2 encoder stages.
    pub channels: [usize; 4],
    pub stem_channels: usize,
    pub fpn_width: usize,
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            stem_channels: 16,
            fpn_width: 32,
            decoder_width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimMethod {
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: OptimMethod::Adamw,
            lr: 1e-3,
            weight_decay: 0.01,
            iterations: 600,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train: SynthConfig,
    pub test: SynthConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train: SynthConfig {
                count: 200,
                seed: 1000,
                ..SynthConfig::default()
            },
            // Illumination strictly brighter than anything seen in training.
            test: SynthConfig {
                count: 50,
                seed: 2000,
                gain: (1.3, 1.45),
                bias: (20.0, 35.0),
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub gndd: GnddConfig,
    pub dfc: DfcConfig,
    pub fdf: FdfConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn noise_seed(&self) -> u64 {
        self.gndd.seed.unwrap_or(self.seed)
    }

    /// Whether the MI difference term enters the loss.
    pub fn mi_active(&self) -> bool {
        self.gndd.enabled && self.fdf.enabled
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels.contains(&0) || m.stem_channels == 0 || m.fpn_width == 0 || m.decoder_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.fdf.enabled {
            let r = self.fdf.gam.reduction;
            for c in m.channels {
                if r == 0 || (3 * c) % r != 0 {
                    return Err(Error::Config(format!(
                        "fdf.gam.reduction {r} does not divide the {} stacked difference channels",
                        3 * c
                    )));
                }
            }
        }
        if self.fdf.bins < 2 {
            return Err(Error::Config("fdf.bins must be >= 2".into()));
        }
        if self.fdf.mi_channels == 0 || !(self.fdf.mi_weight >= 0.0) {
            return Err(Error::Config(
                "fdf.mi_channels must be positive and fdf.mi_weight >= 0".into(),
            ));
        }
        if !(self.gndd.lambda >= 0.0) {
            return Err(Error::Config("gndd.lambda must be >= 0".into()));
        }
        let o = &self.optim;
        if o.iterations == 0 || o.batch_size == 0 || !(o.lr > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optim: iterations, batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

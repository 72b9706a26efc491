//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 7
//! batch_size = 10
//! iterations = 3000
//! activation = "prelu"
//! lr_base = 1e-3
//! lr_max = 8e-3
//! lr_step = 1600
//! widths = [30, 30, 40, 40, 40, 40, 50, 50]
//! head_widths = [150, 150, 3]
//! synthetic_fraction = 1.0
//! checkpoint_every = 500
//!
//! [paths]
//! data_dir = "data"
//! output_dir = "runs/a"
//!
//! [crf]
//! w_bilateral = 2.0
//!
//! [simulation]
//! log_c = 100.0
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::net::NetConfig;
use crate::optim::{CyclicLr, TrainConfig, SYNTHETIC_FRACTIONS};
use crate::tensor::Activation;
use crate::ussim::SimParams;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub activation: Activation,
    pub lr_base: f64,
    pub lr_max: f64,
    pub lr_step: u64,
    pub widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub synthetic_fraction: f64,
    pub checkpoint_every: u64,
    pub paths: Paths,
    pub crf: CrfParams,
    pub simulation: SimParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let lr = CyclicLr::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            batch_size: t.batch_size,
            iterations: t.iterations,
            activation: net.activation,
            lr_base: lr.base,
            lr_max: lr.max,
            lr_step: lr.step_size,
            widths: net.widths,
            head_widths: net.head_widths,
            synthetic_fraction: 1.0,
            checkpoint_every: t.checkpoint_every,
            paths: Paths::default(),
            crf: CrfParams::default(),
            simulation: SimParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            widths: self.widths.clone(),
            head_widths: self.head_widths.clone(),
            activation: self.activation,
            ..NetConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            iterations: self.iterations,
            net: self.net_config(),
            schedule: CyclicLr {
                base: self.lr_base,
                max: self.lr_max,
                step_size: self.lr_step,
            },
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SYNTHETIC_FRACTIONS.contains(&self.synthetic_fraction) {
            return Err(Error::Config(format!(
                "synthetic_fraction must be one of {SYNTHETIC_FRACTIONS:?}, got {}",
                self.synthetic_fraction
            )));
        }
        self.train_config().validate()?;
        self.crf.validate()?;
        self.simulation.validate()
    }

    /// Checks that configured input directories exist.
    pub fn validate_paths(&self) -> Result<()> {
        if let Some(d) = &self.paths.data_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!("data_dir {} is not a directory", d.display())));
            }
        }
        Ok(())
    }
}

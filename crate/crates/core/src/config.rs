//! Run configuration file (TOML), one section per module.
//!
//! ```toml
//! block_size = 500
//!
//! [paths]
//! data_dir = "data"
//! labels = "data/labels.csv"
//! checkpoint = "out/model.json"
//! output = "out"
//!
//! [chip]
//! rows_per_array = 256
//!
//! [noise]
//! enabled = true
//! seed = 1
//!
//! [preproc]
//! pool_window = 32
//!
//! [train]
//! learning_rate = 0.001
//!
//! [perf.params]
//! event_rate = 125e6
//!
//! [perf.rails]
//! asic_analog = 0.2246
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analog::{ChipConfig, NoiseModel};
use crate::error::{Error, Result};
use crate::perf::{EnergyLedger, PerfParams, RailPowers};
use crate::preprocess::PreprocConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            labels: "data/labels.csv".into(),
            checkpoint: "out/model.json".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub synapse_gain_sigma: f64,
    pub neuron_offset_sigma: f64,
    pub readout_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let m = NoiseModel::default();
        Self {
            enabled: true,
            synapse_gain_sigma: m.synapse_gain_sigma,
            neuron_offset_sigma: m.neuron_offset_sigma,
            readout_sigma: m.readout_sigma,
            seed: m.seed,
        }
    }
}

impl NoiseConfig {
    pub fn model(&self) -> NoiseModel {
        if self.enabled {
            NoiseModel {
                synapse_gain_sigma: self.synapse_gain_sigma,
                neuron_offset_sigma: self.neuron_offset_sigma,
                readout_sigma: self.readout_sigma,
                seed: self.seed,
            }
        } else {
            NoiseModel::off().with_seed(self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfConfig {
    pub params: PerfParams,
    pub rails: RailPowers,
    /// Multiplier applied to the layer-formula operation count.
    pub convention_factor: f64,
    /// Measured block energies for `report`; absent means the published block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<EnergyLedger>,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self { params: PerfParams::default(), rails: RailPowers::default(), convention_factor: 1.0, ledger: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Records per uninterrupted inference block.
    pub block_size: usize,
    /// Chips to partition the model onto for inference.
    pub chips: usize,
    pub paths: PathsConfig,
    pub chip: ChipConfig,
    pub noise: NoiseConfig,
    pub preproc: PreprocConfig,
    pub train: TrainConfig,
    pub perf: PerfConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            block_size: 500,
            chips: 1,
            paths: PathsConfig::default(),
            chip: ChipConfig::default(),
            noise: NoiseConfig::default(),
            preproc: PreprocConfig::default(),
            train: TrainConfig::default(),
            perf: PerfConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        if self.chips == 0 {
            return Err(Error::Config("chips must be at least 1".into()));
        }
        self.chip.validate()?;
        self.noise.model().validate()?;
        self.preproc.validate()?;
        self.train.validate()?;
        self.perf.params.validate()?;
        if !(self.perf.convention_factor > 0.0) {
            return Err(Error::Config("perf.convention_factor must be positive".into()));
        }
        if let Some(l) = &self.perf.ledger {
            l.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

use serde::{Deserialize, Serialize};

use super::adc::{AdcConfig, AdcMode};
use crate::error::{Error, Result};

/// Geometry, converter settings and timing of one virtual chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    pub arrays_per_chip: usize,
    /// Physical synapse rows; two rows make one signed row.
    pub rows_per_array: usize,
    pub columns_per_array: usize,
    pub activation_bits: u32,
    /// Magnitude bits; the sign comes from the row pair.
    pub weight_bits: u32,
    pub adc_bits: u32,
    /// Width of the per-synapse address label matched against event addresses.
    pub address_bits: u32,
    /// Membrane units per unit of integer dot product.
    pub mac_gain: f64,
    pub adc_lo: f64,
    pub adc_hi: f64,
    pub reset_level: f64,
    pub event_period_ns: f64,
    pub integration_cycle_us: f64,
}

impl Default for ChipConfig {
    fn default() -> Self {
        let adc_lo = -128.0;
        let adc_hi = 127.0;
        // A full-scale single-row product (31 x 63) spans a quarter of the ADC range.
        let mac_gain = (adc_hi - adc_lo) / 4.0 / (31.0 * 63.0);
        Self {
            arrays_per_chip: 2,
            rows_per_array: 256,
            columns_per_array: 256,
            activation_bits: 5,
            weight_bits: 6,
            adc_bits: 8,
            address_bits: 6,
            mac_gain,
            adc_lo,
            adc_hi,
            reset_level: 0.0,
            event_period_ns: 8.0,
            integration_cycle_us: 5.0,
        }
    }
}

impl ChipConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_owned()));
        if self.arrays_per_chip == 0 || self.rows_per_array == 0 || self.columns_per_array == 0 {
            return fail("array geometry must be non-empty");
        }
        if !self.rows_per_array.is_multiple_of(2) {
            return fail("rows_per_array must be even (signed weights use row pairs)");
        }
        if !(1..=8).contains(&self.activation_bits) {
            return fail("activation_bits must be in 1..=8");
        }
        if !(1..=7).contains(&self.weight_bits) {
            return fail("weight_bits must be in 1..=7");
        }
        if !(1..=16).contains(&self.adc_bits) {
            return fail("adc_bits must be in 1..=16");
        }
        if self.address_bits > 8 {
            return fail("address_bits must be at most 8");
        }
        if !(self.mac_gain.is_finite() && self.mac_gain > 0.0) {
            return fail("mac_gain must be positive");
        }
        if !(self.adc_lo < self.adc_hi) {
            return fail("adc_lo must be below adc_hi");
        }
        if !(self.reset_level >= self.adc_lo && self.reset_level < self.adc_hi) {
            return fail("reset_level must lie inside the ADC range");
        }
        if self.event_period_ns <= 0.0 || self.integration_cycle_us <= 0.0 {
            return fail("timing parameters must be positive");
        }
        Ok(())
    }

    pub fn signed_rows(&self) -> usize {
        self.rows_per_array / 2
    }

    pub fn total_synapses(&self) -> usize {
        self.arrays_per_chip * self.rows_per_array * self.columns_per_array
    }

    pub fn signed_capacity(&self) -> usize {
        self.total_synapses() / 2
    }

    pub fn max_activation(&self) -> u32 {
        (1 << self.activation_bits) - 1
    }

    pub fn max_weight(&self) -> i32 {
        (1 << self.weight_bits) - 1
    }

    pub fn max_code(&self) -> u32 {
        (1 << self.adc_bits) - 1
    }

    pub fn address_labels(&self) -> usize {
        1 << self.address_bits
    }

    /// Membrane units per ADC code over the full converter range.
    pub fn lsb(&self) -> f64 {
        (self.adc_hi - self.adc_lo) / self.max_code() as f64
    }

    /// Accumulators saturate this far from the reset level.
    pub fn membrane_limit(&self) -> f64 {
        4.0 * (self.adc_hi - self.adc_lo)
    }

    pub fn adc(&self, mode: AdcMode) -> AdcConfig {
        let lo = match mode {
            AdcMode::SignedLinear => self.adc_lo,
            AdcMode::Relu => self.reset_level,
        };
        AdcConfig {
            lo,
            hi: self.adc_hi,
            mode,
            bits: self.adc_bits,
        }
    }
}

/// Fixed-pattern and temporal noise of the analog path.
///
/// Offsets and readout noise are given in ADC LSB of the signed converter range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Relative standard deviation of the per-synapse gain.
    pub synapse_gain_sigma: f64,
    pub neuron_offset_sigma: f64,
    pub readout_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            synapse_gain_sigma: 0.02,
            neuron_offset_sigma: 1.0,
            readout_sigma: 1.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn off() -> Self {
        Self {
            synapse_gain_sigma: 0.0,
            neuron_offset_sigma: 0.0,
            readout_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_off(&self) -> bool {
        self.synapse_gain_sigma == 0.0 && self.neuron_offset_sigma == 0.0 && self.readout_sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.synapse_gain_sigma, self.neuron_offset_sigma, self.readout_sigma];
        if sigmas.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("noise sigmas must be finite and non-negative".into()))
        }
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdcMode {
    SignedLinear,
    /// The range floor sits at the reset level, cutting off the negative branch.
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcConfig {
    pub lo: f64,
    pub hi: f64,
    pub mode: AdcMode,
    pub bits: u32,
}

impl AdcConfig {
    pub fn max_code(&self) -> u32 {
        (1 << self.bits) - 1
    }
}

/// Saturating conversion of a membrane value to an ADC code.
///
/// `code = round((clamp(v, lo, hi) - lo) / (hi - lo) * max_code)`, rounding half
/// away from zero. The product is formed before the division so that values on
/// the LSB grid convert without representation error.
pub fn digitize(value: f64, adc: &AdcConfig) -> u32 {
    debug_assert!(adc.lo < adc.hi);
    if adc.mode == AdcMode::Relu && value <= adc.lo {
        return 0;
    }
    if value.is_nan() {
        return 0;
    }
    let clamped = value.clamp(adc.lo, adc.hi);
    ((clamped - adc.lo) * adc.max_code() as f64 / (adc.hi - adc.lo)).round() as u32
}

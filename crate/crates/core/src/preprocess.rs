//! ECG front end: derivative, max-min pooling and 5-bit quantization.

use serde::{Deserialize, Serialize};

use crate::analog::ActivationVector;
use crate::error::{Error, Result};

pub const SAMPLE_MAX: i32 = 4095;
pub const ACTIVATION_MAX: u8 = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub id: String,
    /// 12-bit ADC units.
    pub samples: Vec<i32>,
    pub sample_rate: f64,
    /// 0 = normal sinus, 1 = AFib.
    pub label: Option<u8>,
}

impl EcgRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.samples.iter().position(|s| !(0..=SAMPLE_MAX).contains(s)) {
            return Err(Error::Input(format!(
                "record {}: sample {i} = {} outside 12-bit range",
                self.id, self.samples[i]
            )));
        }
        if let Some(l) = self.label.filter(|&l| l > 1) {
            return Err(Error::Input(format!("record {}: label {l} is not 0 or 1", self.id)));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Input(format!("record {}: sample rate must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub pool_window: usize,
    pub pool_stride: usize,
    pub target_len: usize,
    /// Multiplier from pooled derivative units to activations.
    pub quant_scale: f64,
    /// First raw sample of the analysed window.
    pub offset: usize,
    pub sample_rate: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self { pool_window: 32, pool_stride: 16, target_len: 432, quant_scale: 0.25, offset: 0, sample_rate: 512.0 }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_window == 0 || self.pool_stride == 0 || self.pool_stride > self.pool_window {
            return Err(Error::Config("need 0 < pool_stride <= pool_window".into()));
        }
        if self.target_len == 0 {
            return Err(Error::Config("target_len must be positive".into()));
        }
        if !(self.quant_scale > 0.0) {
            return Err(Error::Config("quant_scale must be positive".into()));
        }
        Ok(())
    }

    /// Derivative samples consumed by `target_len` pooling windows.
    pub fn derivative_len(&self) -> usize {
        (self.target_len - 1) * self.pool_stride + self.pool_window
    }

    /// Raw samples needed from `offset` on.
    pub fn raw_len(&self) -> usize {
        self.derivative_len() + 1
    }

    pub fn output_rate(&self) -> f64 {
        self.sample_rate / self.pool_stride as f64
    }
}

pub fn discrete_derivative(samples: &[i32]) -> Result<Vec<i32>> {
    if samples.len() < 2 {
        return Err(Error::TooShort { len: samples.len(), needed: 2 });
    }
    Ok(samples.windows(2).map(|w| w[1] - w[0]).collect())
}

pub fn pool_len(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// `max - min` over windows of `window` samples taken every `stride`.
pub fn maxmin_pool(signal: &[i32], window: usize, stride: usize) -> Result<Vec<i32>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be positive".into()));
    }
    if signal.len() < window {
        return Err(Error::TooShort { len: signal.len(), needed: window });
    }
    Ok((0..pool_len(signal.len(), window, stride))
        .map(|k| {
            let w = &signal[k * stride..k * stride + window];
            let (lo, hi) = w.iter().fold((i32::MAX, i32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .collect())
}

pub fn quantize5(values: &[i32], quant_scale: f64) -> Result<ActivationVector> {
    if !(quant_scale > 0.0) {
        return Err(Error::Config(format!("quant_scale must be positive, got {quant_scale}")));
    }
    Ok(ActivationVector::new(
        values
            .iter()
            .map(|&v| (f64::from(v) * quant_scale).round().clamp(0.0, f64::from(ACTIVATION_MAX)) as u8)
            .collect(),
    ))
}

/// Pooled derivative of the analysed window, before quantization.
pub fn pooled_features(rec: &EcgRecord, cfg: &PreprocConfig) -> Result<Vec<i32>> {
    cfg.validate()?;
    rec.validate()?;
    let needed = cfg.offset + cfg.raw_len();
    if rec.samples.len() < needed {
        return Err(Error::TooShort { len: rec.samples.len(), needed });
    }
    let window = &rec.samples[cfg.offset..needed];
    let d = discrete_derivative(window)?;
    maxmin_pool(&d, cfg.pool_window, cfg.pool_stride)
}

pub fn preprocess_record(rec: &EcgRecord, cfg: &PreprocConfig) -> Result<ActivationVector> {
    quantize5(&pooled_features(rec, cfg)?, cfg.quant_scale)
}

/// Scale mapping the 99th percentile (nearest rank) of all pooled values to
/// the top activation code.
pub fn calibrate_scale<'a>(records: impl IntoIterator<Item = &'a EcgRecord>, cfg: &PreprocConfig) -> Result<f64> {
    let mut values = Vec::new();
    for rec in records {
        values.extend(pooled_features(rec, cfg)?);
    }
    if values.is_empty() {
        return Err(Error::Input("no records to calibrate on".into()));
    }
    values.sort_unstable();
    let rank = (values.len() as f64 * 0.99).ceil() as usize;
    let p99 = values[rank.clamp(1, values.len()) - 1];
    if p99 <= 0 {
        return Err(Error::Input("pooled values are all zero".into()));
    }
    Ok(f64::from(ACTIVATION_MAX) / f64::from(p99))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(samples: Vec<i32>) -> EcgRecord {
        EcgRecord { id: "r".into(), samples, sample_rate: 512.0, label: None }
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(discrete_derivative(&[5, 5, 5]).unwrap(), vec![0, 0]);
        assert_eq!(discrete_derivative(&[1, 2, 3, 4]).unwrap(), vec![1, 1, 1]);
        assert!(discrete_derivative(&[1]).is_err());
    }

    #[test]
    fn pool_examples() {
        assert_eq!(maxmin_pool(&vec![0; 6928], 32, 16).unwrap().len(), 432);
        let square: Vec<i32> = (0..100).map(|i| if i % 2 == 0 { 7 } else { -7 }).collect();
        assert!(maxmin_pool(&square, 32, 16).unwrap().iter().all(|&v| v == 14));
        assert!(maxmin_pool(&[1, 2], 3, 1).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = quantize5(&[0, 402, 20], 0.1).unwrap();
        assert_eq!(q.values(), &[0, 31, 2]);
        assert!(quantize5(&[1], 0.0).is_err());
    }

    #[test]
    fn record_lengths() {
        let cfg = PreprocConfig::default();
        assert_eq!(cfg.raw_len(), 6929);
        assert_eq!(cfg.output_rate(), 32.0);
        // 13.54 s at 512 Hz.
        let n = (13.54f64 * 512.0) as usize;
        assert_eq!(preprocess_record(&record(vec![2048; n]), &cfg).unwrap(), ActivationVector::zeros(432));
        assert!(matches!(preprocess_record(&record(vec![2048; 6928]), &cfg), Err(Error::TooShort { .. })));
        assert!(preprocess_record(&record(vec![5000; n]), &cfg).is_err());
    }

    #[test]
    fn calibration_saturates_at_most_one_percent() {
        let cfg = PreprocConfig { target_len: 50, ..Default::default() };
        let recs: Vec<EcgRecord> = (0..20)
            .map(|r| record((0..cfg.raw_len()).map(|i| ((i * 37 + r * 11) % 997) as i32 + 1000).collect()))
            .collect();
        let scale = calibrate_scale(&recs, &cfg).unwrap();
        let pooled: Vec<i32> = recs.iter().flat_map(|r| pooled_features(r, &cfg).unwrap()).collect();
        let clipped = pooled.iter().filter(|&&v| f64::from(v) * scale > 31.0).count();
        assert!(clipped as f64 <= 0.01 * pooled.len() as f64);
    }

    proptest! {
        #[test]
        fn composition_is_stepwise(samples in prop::collection::vec(0i32..4096, 200..400), scale in 0.01f64..2.0) {
            let cfg = PreprocConfig { target_len: 5, quant_scale: scale, ..Default::default() };
            let rec = record(samples.clone());
            let raw = &samples[..cfg.raw_len()];
            let expected = quantize5(&maxmin_pool(&discrete_derivative(raw).unwrap(), 32, 16).unwrap(), scale).unwrap();
            prop_assert_eq!(preprocess_record(&rec, &cfg).unwrap(), expected);
        }
    }
}

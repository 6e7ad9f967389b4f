//! Synthetic ECG-like traces standing in for the non-public competition set.
//!
//! Sinus records: a fixed beat template (P, QRS, T) repeated at a nearly
//! regular RR interval. AFib records: no P wave, low-amplitude fibrillatory
//! ripple, and independently drawn irregular RR intervals. Both get baseline
//! wander and white measurement noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{EcgRecord, SAMPLE_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate: f64,
    /// Seconds per record.
    pub duration: f64,
    pub baseline: f64,
    /// R-peak amplitude range in ADC units.
    pub amplitude: (f64, f64),
    /// Heart rate ranges in beats per minute.
    pub sinus_bpm: (f64, f64),
    pub afib_bpm: (f64, f64),
    /// Relative RR standard deviation.
    pub sinus_rr_jitter: f64,
    pub afib_rr_jitter: f64,
    /// Fibrillatory wave amplitude relative to the R peak.
    pub f_wave: f64,
    pub wander: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 512.0,
            duration: 14.0,
            baseline: 2048.0,
            amplitude: (400.0, 800.0),
            sinus_bpm: (55.0, 100.0),
            afib_bpm: (70.0, 130.0),
            sinus_rr_jitter: 0.03,
            afib_rr_jitter: 0.22,
            f_wave: 0.05,
            wander: 120.0,
            noise: 4.0,
        }
    }
}

/// (relative amplitude, centre offset in s, width in s)
const SINUS_WAVES: [(f64, f64, f64); 5] =
    [(0.12, -0.20, 0.025), (-0.12, -0.035, 0.010), (1.0, 0.0, 0.012), (-0.25, 0.035, 0.012), (0.30, 0.26, 0.05)];

fn add_beat(out: &mut [f64], centre: f64, amp: f64, waves: &[(f64, f64, f64)], rate: f64) {
    for &(a, offset, width) in waves {
        let t0 = centre + offset;
        let lo = (((t0 - 5.0 * width) * rate).floor().max(0.0)) as usize;
        let hi = (((t0 + 5.0 * width) * rate).ceil().max(0.0) as usize).min(out.len());
        for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let z = (i as f64 / rate - t0) / width;
            *v += amp * a * (-0.5 * z * z).exp();
        }
    }
}

/// One record; `afib` selects the rhythm.
pub fn synth_record(id: impl Into<String>, afib: bool, cfg: &SynthConfig, rng: &mut impl Rng) -> EcgRecord {
    let rate = cfg.sample_rate;
    let n = (cfg.duration * rate).round() as usize;
    let mut x = vec![0.0; n];
    let amp = rng.gen_range(cfg.amplitude.0..=cfg.amplitude.1);
    let (bpm, jitter) = if afib { (cfg.afib_bpm, cfg.afib_rr_jitter) } else { (cfg.sinus_bpm, cfg.sinus_rr_jitter) };
    let mean_rr = 60.0 / rng.gen_range(bpm.0..=bpm.1);
    let rr = Normal::new(mean_rr, mean_rr * jitter).expect("finite RR");
    let waves: Vec<(f64, f64, f64)> = if afib { SINUS_WAVES[1..].to_vec() } else { SINUS_WAVES.to_vec() };

    let mut t = rng.gen_range(0.0..mean_rr);
    while t < cfg.duration + 0.5 {
        add_beat(&mut x, t, amp, &waves, rate);
        t += rr.sample(rng).max(0.3 * mean_rr);
    }

    if afib {
        let f = rng.gen_range(4.0..8.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let fa = cfg.f_wave * amp;
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / rate;
            *v += fa * (std::f64::consts::TAU * f * t + phase + 0.8 * (1.3 * t).sin()).sin();
        }
    }

    let wf = rng.gen_range(0.05..0.5);
    let wp = rng.gen_range(0.0..std::f64::consts::TAU);
    let wa = rng.gen_range(0.0..cfg.wander);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let samples = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i as f64 / rate;
            let raw = cfg.baseline + v + wa * (std::f64::consts::TAU * wf * t + wp).sin() + noise.sample(rng);
            raw.round().clamp(0.0, f64::from(SAMPLE_MAX)) as i32
        })
        .collect();
    EcgRecord { id: id.into(), samples, sample_rate: rate, label: Some(u8::from(afib)) }
}

pub fn record_id(i: usize) -> String {
    format!("rec{i:05}")
}

/// `n` labelled records, `round(n * afib_fraction)` of them AFib in shuffled order.
pub fn synth_dataset(n: usize, afib_fraction: f64, seed: u64, cfg: &SynthConfig) -> Result<Vec<EcgRecord>> {
    if n < 2 {
        return Err(Error::Input("need at least two records".into()));
    }
    if !(afib_fraction > 0.0 && afib_fraction < 1.0) {
        return Err(Error::Input(format!("afib fraction {afib_fraction} outside (0, 1)")));
    }
    let n_afib = ((n as f64 * afib_fraction).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_afib).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &afib)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            synth_record(record_id(i), afib, cfg, &mut r)
        })
        .collect())
}

//! Fixtures shared by the criterion benches in `benches/`.

use bss2_core::preprocess::EcgRecord;
use bss2_core::synth::{synth_record, SynthConfig};
use bss2_core::{ActivationVector, ChipConfig, SignedWeightMatrix};

/// Deterministic full-array weight matrix and input vector.
pub fn full_array(cfg: &ChipConfig) -> (SignedWeightMatrix, ActivationVector) {
    let (rows, cols) = (cfg.signed_rows(), cfg.columns_per_array);
    let max_w = cfg.max_weight() as i64;
    let max_a = cfg.max_activation() as usize;
    let w = (0..rows * cols).map(|i| ((i as i64 * 37 % (2 * max_w + 1)) - max_w) as i16).collect();
    let x = (0..rows).map(|i| (i * 11 % (max_a + 1)) as u8).collect();
    (SignedWeightMatrix::new(rows, cols, w).expect("weights in range"), ActivationVector::new(x))
}

/// One synthetic record of the default length.
pub fn record(seed: u64) -> EcgRecord {
    use rand::SeedableRng;
    synth_record("bench", seed % 2 == 1, &SynthConfig::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

//! Behavioral model of one virtual chip's non-spiking vector-matrix path.
//!
//! Signed weights occupy pairs of physical synapse rows: the even row feeds the
//! excitatory input of each neuron, the odd row the inhibitory one. Inputs are
//! 5-bit pulse lengths; every synapse whose address label matches an event adds
//! `weight x activation` to its column's membrane. The parallel ADC digitizes the
//! membranes after the integration cycle.

mod adc;
mod chip;
mod config;

pub use adc::{digitize, AdcConfig, AdcMode};
pub use chip::{ActivationVector, ChipState, Event, MembraneState, SignedWeightMatrix};
pub use config::{ChipConfig, NoiseModel};

//! Simulator and toolchain for analog synapse-array inference.
//!
//! * [`analog`]: bit-exact behavioral model of one chip's vector-matrix path.
//! * [`graph`]: layer IR, partitioning onto arrays, lowering to an instruction
//!   stream and execution on one or more chips.
//! * [`preprocess`]: derivative / max-min pooling / 5-bit quantization of ECG traces.
//! * [`trainer`]: hardware-in-the-loop training against the simulator.
//! * [`perf`]: throughput, area and energy accounting.
//! * [`synth`], [`io`], [`config`]: synthetic records, CSV files and the run
//!   configuration shared with the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analog;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod perf;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use analog::{
    digitize, ActivationVector, AdcConfig, AdcMode, ChipConfig, ChipState, NoiseModel,
    SignedWeightMatrix,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{build_paper_model, InstructionStream, LayerGraph, PartitionPlan, QuantizedModel};
pub use preprocess::{EcgRecord, PreprocConfig};

//! Layer graphs, their mapping onto synapse arrays, and execution.

mod exec;
mod ir;
mod lower;
mod model;
mod partition;
pub mod reference;
mod text;

pub use exec::{argmax, execute, requantize, Inference, MacTrace, Runtime, Trace};
pub use ir::{build_paper_model, Layer, LayerGraph, Node};
pub use lower::{lower, AdcTarget, DigitalOp, Instruction, InstructionStream, LookupEntry, LookupTable};
pub use model::{default_shift, Checkpoint, MacParams, QuantizedModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use partition::{partition, partition_with, Packing, PartialSumGroup, PartitionPlan, Placement};

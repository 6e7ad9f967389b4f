use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("array index {index} out of range (chip has {arrays} arrays)")]
    NoSuchArray { index: usize, arrays: usize },

    #[error(
        "placement of {rows}x{cols} signed block at row {row_offset}, column {col_offset} \
         does not fit a {max_rows}x{max_cols} array"
    )]
    PlacementOutOfBounds {
        rows: usize,
        cols: usize,
        row_offset: usize,
        col_offset: usize,
        max_rows: usize,
        max_cols: usize,
    },

    #[error("weight {value} exceeds the {bits}-bit magnitude range")]
    WeightOutOfRange { value: i32, bits: u32 },

    #[error("activation {value} at index {index} exceeds the {bits}-bit range")]
    ActivationOutOfRange { index: usize, value: u32, bits: u32 },

    #[error("address label {label} exceeds the {bits}-bit address space")]
    LabelOutOfRange { label: u32, bits: u32 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid layer graph: {0}")]
    Graph(String),

    #[error("dependency cycle through node {0}")]
    Cycle(usize),

    #[error("layer {node} cannot be split onto the array geometry: {reason}")]
    Unsplittable { node: usize, reason: String },

    #[error("not enough hardware: {0}")]
    InsufficientHardware(String),

    #[error("instruction references placement {0}, which is not loaded")]
    UnloadedPlacement(usize),

    #[error("malformed instruction stream: {0}")]
    Stream(String),

    #[error("malformed input: {0}")]
    Input(String),

    #[error("signal of length {len} is too short (need at least {needed})")]
    TooShort { len: usize, needed: usize },

    #[error("model is not deployed")]
    NotDeployed,

    #[error("class {0} has no members in the split")]
    EmptyClass(u8),

    #[error("record {0} has no label")]
    Unlabeled(String),

    #[error("{0}")]
    Perf(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

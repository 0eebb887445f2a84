use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{context}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        context: String,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("non-finite value {value} detected in {location}")]
    NonFinite { location: String, value: f64 },

    #[error(
        "filter extent {extent_rows}x{extent_cols} (with dilation) exceeds padded input {input_rows}x{input_cols}"
    )]
    KernelTooLarge {
        extent_rows: usize,
        extent_cols: usize,
        input_rows: usize,
        input_cols: usize,
    },

    #[error("cannot broadcast shapes {lhs:?} and {rhs:?}")]
    BroadcastMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("unknown filter preset '{0}'")]
    UnknownPreset(String),

    #[error("the dilated add-on cannot stand alone; attach it to a base preset (e.g. square-3-d)")]
    DilatedStandalone,

    #[error("no grouping filter fits the {rows}x{cols} map; discarded shapes: {discarded}")]
    AllFiltersDiscarded {
        rows: usize,
        cols: usize,
        discarded: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("descriptor error: {0}")]
    Descriptor(String),

    #[error("dataset file truncated: needed {needed} bytes for {what}, got {got}")]
    DataTruncated {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("corrupt dataset header at byte offset {offset}: {detail}")]
    DataHeader { offset: usize, detail: String },

    #[error("label {label} at record {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("dataset dimension mismatch: {0}")]
    DataDimension(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training aborted: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user-supplied configuration rather than
    /// runtime misbehavior; the CLI maps these to their own exit code.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Descriptor(_)
                | Error::UnknownPreset(_)
                | Error::DilatedStandalone
                | Error::AllFiltersDiscarded { .. }
        )
    }
}

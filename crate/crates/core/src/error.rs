use thiserror::Error;

/// Errors surfaced by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape error{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape { layer: Option<usize>, msg: String },

    #[error("real-valued weights passed to a binary kernel")]
    RealWeightsInBinaryPath,

    #[error("degenerate batch-norm: zero scale on channel {channel}")]
    DegenerateBn { channel: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("cycle count {cycles} outside BER curve range [{min}, {max}]")]
    Range { cycles: u64, min: u64, max: u64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape_at(layer: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: Some(layer),
            msg: msg.into(),
        }
    }
}

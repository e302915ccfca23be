use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmbeditError>;

#[derive(Debug, Error)]
pub enum EmbeditError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in tensor at flat index {index}")]
    NonFinite { index: usize },

    #[error("unknown token: {word:?}")]
    UnknownToken { word: String },

    #[error("prompt needs {needed} tokens but context length is {context_length}")]
    Overflow { needed: usize, context_length: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Index { id: u32, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("archive format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("inconsistent edit request: {0}")]
    InconsistentRequest(String),

    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("tape usage error: {0}")]
    Usage(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("encoder {index}: {source}")]
    Encoder {
        index: usize,
        #[source]
        source: Box<EmbeditError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EmbeditError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        EmbeditError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        EmbeditError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code class: 1 usage/config, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            EmbeditError::Config(_) | EmbeditError::Usage(_) | EmbeditError::Range(_) => 1,
            EmbeditError::Divergence { .. } => 3,
            EmbeditError::Encoder { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every target position is ignored, loss is undefined")]
    EmptyLoss,

    #[error("invalid state: {0}")]
    State(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("sequence needs position {position} but max_positions is {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("modality error: {0}")]
    Modality(String),

    #[error("caption has {len} tokens, limit is {max}")]
    CaptionTooLong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("non-finite loss at step {step} of stage {stage}: {detail}")]
    NonFinite {
        step: u64,
        stage: String,
        detail: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("idf is degenerate for a corpus of {0} item(s); need at least 2")]
    IdfDegenerate(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad failure classes, used by the command line front end to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Prerequisite,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Prerequisite(_) => ErrorKind::Prerequisite,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

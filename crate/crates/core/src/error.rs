use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sample {id}: {rule}")]
    Validation { id: String, rule: String },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("boxes are in different coordinate spaces")]
    MixedSpaces,

    #[error("{0} requires a nonempty input")]
    Empty(&'static str),

    #[error("split needs at least 3 patients, got {0}")]
    TooFewPatients(usize),

    #[error("token {0:?} is already in the vocabulary")]
    DuplicateToken(String),

    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("image is {got_h}x{got_w}, model expects {want_h}x{want_w}")]
    ImageSize {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("no <BOX> embedding available")]
    MissingBoxEmbedding,

    #[error("non-finite {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("no prediction for sample {0}")]
    MissingPrediction(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(id: &str, rule: impl Into<String>) -> Self {
        Error::Validation {
            id: id.to_string(),
            rule: rule.into(),
        }
    }
}

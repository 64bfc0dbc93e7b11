use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Error, Debug)]
pub enum TahError {
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("cache consistency error: {0}")]
    Cache(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("degenerate class at depth {depth}: {detail}")]
    DegenerateClass { depth: usize, detail: String },

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TahError>;

macro_rules! bail_dim {
    ($($arg:tt)*) => { return Err(crate::error::TahError::Dim(format!($($arg)*))) };
}
macro_rules! bail_contract {
    ($($arg:tt)*) => { return Err(crate::error::TahError::Contract(format!($($arg)*))) };
}
macro_rules! bail_config {
    ($($arg:tt)*) => { return Err(crate::error::TahError::Config(format!($($arg)*))) };
}

pub(crate) use {bail_config, bail_contract, bail_dim};

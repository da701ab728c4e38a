use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("invalid mixture spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("sampling diverged at step {step} (t = {t}): {msg}")]
    Diverged { step: usize, t: f64, msg: String },

    #[error("checkpoint conversion error: differing tensors {0:?}")]
    ConversionMismatch(Vec<String>),

    #[error("bad checkpoint magic in {0}")]
    BadMagic(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("missing input file {}: {hint}", path.display())]
    MissingFile { path: PathBuf, hint: String },

    #[error("type error: {0}")]
    Type(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit code category used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigParse { .. } | Error::MissingFile { .. } => 2,
            Error::BadMagic(_) | Error::Version { .. } | Error::Crc { .. } | Error::Corrupt(_) => 3,
            Error::Shape(_) | Error::ConversionMismatch(_) | Error::Type(_) => 4,
            Error::Numeric(_) | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::Diverged { .. } => 5,
            Error::Io(_) | Error::Csv(_) => 6,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("{have} ground-truth pairs exceed the padding target of {target}")]
    TooManyPairs { have: usize, target: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("denoiser failed: {0}")]
    Denoiser(String),

    #[error("frame {got} is not after the previous frame {last}")]
    NonMonotoneFrame { got: u32, last: u32 },

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("metrics undefined: {0}")]
    Undefined(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

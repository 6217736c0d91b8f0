use thiserror::Error;

/// Errors raised by the inference and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("objective is not concave at the current iterate: {0}")]
    NonConcave(String),

    #[error("newton iteration did not converge after {iters} iterations (gradient norm {grad_norm:.3e}); last iterate {iterate:?}")]
    NoConvergence {
        iters: usize,
        grad_norm: f64,
        iterate: Vec<f64>,
    },

    /// Failure inside one phase of the fit loop.
    #[error("fit failed in phase `{phase}` at iteration {iteration}: {source}")]
    Phase {
        phase: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str, iteration: usize) -> Self {
        Error::Phase {
            phase,
            iteration,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Shape(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_shape;

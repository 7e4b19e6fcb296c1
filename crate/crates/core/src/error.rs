use std::path::PathBuf;

use crate::decomposer::PhaseTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite objective in phase {phase} at iteration {iteration}")]
    NonFinite {
        phase: &'static str,
        iteration: usize,
        traces: Vec<PhaseTrace>,
    },

    #[error(
        "degenerate solution in phase {phase} at iteration {iteration}: mean diffuse \
         intensity {mean_diffuse:.3e} fell below {threshold:.3e}"
    )]
    Degenerate {
        phase: &'static str,
        iteration: usize,
        mean_diffuse: f64,
        threshold: f64,
        traces: Vec<PhaseTrace>,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn with_traces(self, t: Vec<PhaseTrace>) -> Self {
        match self {
            Error::NonFinite { phase, iteration, .. } => Error::NonFinite { phase, iteration, traces: t },
            Error::Degenerate {
                phase,
                iteration,
                mean_diffuse,
                threshold,
                ..
            } => Error::Degenerate {
                phase,
                iteration,
                mean_diffuse,
                threshold,
                traces: t,
            },
            other => other,
        }
    }

    /// Loss traces recorded before an optimization failure, if any.
    pub fn traces(&self) -> Option<&[PhaseTrace]> {
        match self {
            Error::NonFinite { traces, .. } | Error::Degenerate { traces, .. } => Some(traces),
            _ => None,
        }
    }
}

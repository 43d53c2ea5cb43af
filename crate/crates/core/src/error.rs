use std::io;

use thiserror::Error;

/// Errors produced by the DSE library.
#[derive(Debug, Error)]
pub enum DseError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("kind error: {0}")]
    Kind(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// Training produced a non-finite loss. `last_finite_epoch` is the last
    /// epoch whose mean loss was finite, if any.
    #[error("training error at step {step}: non-finite loss (last finite epoch: {last_finite_epoch:?})")]
    Training {
        step: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("generation error: {0}")]
    Generation(String),

    /// An error raised inside a named stage of a multi-stage pipeline.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DseError>,
    },
}

impl DseError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DseError::Shape(msg.into())
    }

    pub(crate) fn kind(msg: impl Into<String>) -> Self {
        DseError::Kind(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DseError::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        DseError::Argument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        DseError::Format(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        DseError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, DseError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

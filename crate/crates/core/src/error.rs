use std::fmt;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::diversity::DiversityError;
use crate::ees::EesError;
use crate::gapsim::GapError;
use crate::llm::LlmError;
use crate::metrics::MetricsError;
use crate::prompting::PromptError;
use crate::synthesis::SynthesisError;
use crate::task::TaskError;
use crate::trainer::TrainError;

/// Coarse failure class, one per process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input: arguments, task files, datasets, scripts.
    Config,
    /// The LLM or the external trainer failed.
    Backend,
    /// A broken invariant inside the engine.
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Backend => 3,
            ErrorCategory::Internal => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Backend => "backend",
            ErrorCategory::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ees(#[from] EesError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

fn llm_category(e: &LlmError) -> ErrorCategory {
    match e {
        LlmError::Prompt(_) | LlmError::Script(_) | LlmError::InvalidRequest(_) => ErrorCategory::Config,
        _ => ErrorCategory::Backend,
    }
}

fn train_category(e: &TrainError) -> ErrorCategory {
    match e {
        TrainError::Protocol(_) | TrainError::Remote(_) | TrainError::Io(_) => ErrorCategory::Backend,
        TrainError::Stale | TrainError::Misaligned(_) | TrainError::KindMismatch { .. } => ErrorCategory::Internal,
        _ => ErrorCategory::Config,
    }
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Llm(e) => llm_category(e),
            Error::Synthesis(e) => match e {
                SynthesisError::Backend(e) | SynthesisError::Rationales { source: e, .. } => llm_category(e),
                SynthesisError::Exhausted { .. } => ErrorCategory::Backend,
                SynthesisError::Dataset(_) => ErrorCategory::Internal,
                _ => ErrorCategory::Config,
            },
            Error::Train(e) => train_category(e),
            Error::Ees(e) => match e {
                EesError::Backend(e) => llm_category(e),
                EesError::Train(e) => train_category(e),
                EesError::Metrics(_) | EesError::Dataset(_) => ErrorCategory::Internal,
                _ => ErrorCategory::Config,
            },
            Error::Internal(_) => ErrorCategory::Internal,
            _ => ErrorCategory::Config,
        }
    }
}

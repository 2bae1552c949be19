use std::fmt;
use std::process::ExitCode;

use disenpoi::bundle::BundleError;
use disenpoi::evaluator::EvalError;
use disenpoi::ingest::IngestError;
use disenpoi::model::ModelError;
use disenpoi::trainer::TrainError;

/// Process exit status. The numeric values are a stable contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Io = 1,
    Validation = 2,
    Compatibility = 3,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

/// An error together with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(status: Status, error: impl Into<anyhow::Error>) -> Self {
        Self {
            status,
            error: error.into(),
        }
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Self::new(Status::Io, error)
    }

    pub fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self::new(Status::Validation, error)
    }

    pub fn compatibility(error: impl Into<anyhow::Error>) -> Self {
        Self::new(Status::Compatibility, error)
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            status: self.status,
            error: self.error.context(msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Read { .. } => Self::io(e),
            _ => Self::validation(e),
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Io { .. } => Self::io(e),
            _ => Self::validation(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => Self::io(e),
            ModelError::EmptyContext => Self::validation(e),
            // shape errors inside the network mean weights and data disagree
            ModelError::Autodiff(_)
            | ModelError::ManifestMismatch(_)
            | ModelError::MalformedCheckpoint(_)
            | ModelError::PoiOutOfRange { .. } => Self::compatibility(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Io(_) => Self::io(e),
            _ => Self::validation(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::Ingest(m) => m.into(),
            TrainError::ShapeMismatch(_) => Self::compatibility(e),
            TrainError::InvalidConfig(_) | TrainError::Diverged(_) => Self::validation(e),
        }
    }
}

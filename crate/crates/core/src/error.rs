use std::path::Path;

use thiserror::Error;

use crate::discovery::DiscoveryError;
use crate::engine::EngineError;
use crate::env::EnvError;
use crate::forest::ForestError;
use crate::model::ModelError;
use crate::policy::PolicyError;
use crate::provider::ProviderError;
use crate::student::StudentError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl IoError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Top-level error for episode orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("config: {0}")]
    Config(String),
    #[error("replay requires deterministic backends: {0}")]
    ReplayRequiresDeterministicBackends(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Stable orientation dynamical systems on SO(3) with learned time-varying
//! conic constraints enforced by a control-barrier-function QP.
//!
//! Pipeline: [`dataset`] ingests demonstrations, [`gmm`] and [`ds`] fit the
//! stable rotational DS, [`cones`] learns the cone angles, [`filter`] solves
//! the safety QP and [`sim`] runs the reference/executor pair. [`teleop`]
//! exposes the simulator as a live session service.

pub mod cones;
pub mod dataset;
pub mod ds;
pub mod filter;
pub mod fixtures;
pub mod gmm;
pub mod lwr;
pub mod manifest;
pub mod model;
pub mod sim;
pub mod so3;
pub mod teleop;

use thiserror::Error;

pub use so3::{Rotation, So3Error};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("mixture collapsed: {remaining} components remain")]
    DegenerateComponent { remaining: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("eigen-decomposition failed: {0}")]
    EigenFailure(String),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
}

/// Top-level error with a process exit-code classification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("environment: {0}")]
    Environment(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use dataset::DatasetError as D;
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Dataset(D::Io { .. }) => 3,
            Error::Learn(LearnError::Dataset(D::Io { .. })) => 3,
            // malformed input files are an I/O-class failure
            Error::Format(_) | Error::Dataset(D::Parse(_)) => 3,
            Error::Environment(_) => 4,
            _ => 5,
        }
    }
}

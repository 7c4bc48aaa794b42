//! Project persistence, the per-project job queue, the HTTP API and the
//! command line around the `texsynth` pipeline.
//!
//! A project is a directory:
//!
//! ```text
//! <project>/
//!   project.json        index: images, finished stages, prototype; replaced atomically
//!   config.toml         pipeline configuration
//!   gen-<n>/            artifacts written by one committed job
//!   trajectories/<id>/  stored inversion or generation trajectories (TXF1 stacks)
//! ```
//!
//! Jobs write into a `.staging-<n>` directory, which is renamed to `gen-<n>`
//! before the index that references it is swapped in. Anything not reachable
//! from the index is garbage and is removed when the project is next opened.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod config;
mod denoiser;
pub mod jobs;
pub mod project;
mod stages;
mod studio;

pub use config::StudioConfig;
pub use jobs::{Job, JobKind, JobSpec, JobState};
pub use project::{ArtifactKind, ImageEntry, Origin, Project, ProjectIndex, Stage, StageRecord};
pub use studio::Studio;

use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum StudioError {
    #[error("{what} {id:?} not found")]
    NotFound { what: &'static str, id: String },
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    MissingPrerequisite { missing: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt project state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pipeline(#[from] texsynth::Error),
}

impl StudioError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        StudioError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        StudioError::NotFound {
            what,
            id: id.into(),
        }
    }

    pub fn missing(missing: impl Into<String>, message: impl Into<String>) -> Self {
        StudioError::MissingPrerequisite {
            missing: missing.into(),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            StudioError::NotFound { .. } => "not_found",
            StudioError::Conflict(_) => "conflict",
            StudioError::MissingPrerequisite { .. } => "missing_prerequisite",
            StudioError::Invalid(_) | StudioError::Config(_) => "invalid",
            StudioError::Io { .. } | StudioError::Corrupt(_) | StudioError::Pipeline(_) => {
                "internal"
            }
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            missing_prerequisite: match self {
                StudioError::MissingPrerequisite { missing, .. } => Some(missing.clone()),
                _ => None,
            },
        }
    }
}

macro_rules! pipeline_error {
    ($($t:ty),*) => {$(
        impl From<$t> for StudioError {
            fn from(e: $t) -> Self {
                StudioError::Pipeline(e.into())
            }
        }
    )*};
}

pipeline_error!(
    texsynth::GridError,
    texsynth::diffusion::DiffusionError,
    texsynth::edit::EditError,
    texsynth::infinite::InfiniteError,
    texsynth::cluster::ClusterError,
    texsynth::threshold::ThresholdError
);

/// The JSON shape of every error the service or the CLI reports.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub missing_prerequisite: Option<String>,
}

pub type Result<T, E = StudioError> = std::result::Result<T, E>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/studio.md")]
    struct Studio;
}

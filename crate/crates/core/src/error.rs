use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("i/o error on {path}: {source}")]
    IoPath { path: PathBuf, source: io::Error },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("unknown node ids: {0:?}")]
    UnknownNodes(Vec<u32>),

    #[error("graph has no edges; {0} is undefined")]
    Edgeless(&'static str),

    #[error("graph is empty")]
    EmptyGraph,

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("node {0} has no cluster assignment")]
    Unassigned(u32),

    #[error("cluster {0} is referenced but has no member nodes")]
    EmptyCluster(usize),

    #[error("entity {0} is missing from the subgraph embedding table")]
    MissingSubgraphEntity(u32),

    #[error("instance {0} has no precomputed features")]
    MissingFeatures(String),

    #[error("aspect {aspect:?} maps to both {first:?} and {second:?}")]
    ConflictingAspect {
        aspect: String,
        first: String,
        second: String,
    },

    #[error("training diverged in {stage} at step {step} (loss = {loss})")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("config key {key}: {message}")]
    Config { key: String, message: String },

    #[error("stage {stage} needs the output of {requires}; run `{requires}` first")]
    MissingStage {
        stage: &'static str,
        requires: &'static str,
    },

    #[error("stage {stage}: upstream artifacts changed since {upstream} ran:\n{diff}")]
    StaleUpstream {
        stage: &'static str,
        upstream: &'static str,
        diff: String,
    },

    #[error("mixed provenance: {0}")]
    Provenance(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }

    pub fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoPath { path, source }
    }
}

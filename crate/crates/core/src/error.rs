use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: the two column vectors are parallel or zero")]
    DegenerateRotation,

    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("alignment underdetermined: {0}")]
    AlignmentUnderdetermined(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mesh is not watertight: {count} offending edge(s), first: {edges:?}")]
    NotWatertight {
        count: usize,
        edges: Vec<(u32, u32)>,
    },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid scale {0}: scales must be positive")]
    InvalidScale(f64),

    #[error("missing evidence: {0}")]
    MissingEvidence(String),

    #[error("degenerate evidence: {0}")]
    DegenerateEvidence(String),

    #[error("fit diverged at step {step}: term `{term}` is not finite")]
    DivergedFit { term: String, step: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid hand model asset: {0}")]
    InvalidAsset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

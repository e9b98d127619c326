use std::io;

use thiserror::Error;

/// Errors produced by the reconstruction pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("query point {0:?} lies outside the grid bounds")]
    QueryOutsideGrid([f64; 3]),

    #[error("grid too small: every axis needs at least {min} vertices, got {got:?}")]
    GridTooSmall { min: usize, got: Vec<usize> },

    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("ray does not intersect the bounding box")]
    NoIntersection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mesh has no triangles")]
    EmptyMesh,

    #[error("point set is empty")]
    EmptySet,

    #[error("face lies on the grid boundary")]
    FaceOnBoundary,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] p2p_nn::NnError),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud already has {0} channels")]
    AlreadyAugmented(usize),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid search region: {0}")]
    InvalidRegion(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("variant {variant} cannot take {input} inputs")]
    VariantInputMismatch { variant: String, input: String },
    #[error("search region of frame {frame} is empty")]
    EmptyRegion { frame: usize },
    #[error("{path}: length {len} is not a multiple of 16 bytes")]
    TruncatedFile { path: PathBuf, len: u64 },
    #[error("{path}:{line}: {msg}")]
    MalformedLine { path: PathBuf, line: usize, msg: String },
    #[error("{path}: no velodyne-to-camera transform")]
    MissingCalib { path: PathBuf },
    #[error("pred has {pred} boxes, gt has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("non-finite loss at epoch {epoch} step {step}; state dumped to {dump}")]
    NonFiniteLoss { epoch: usize, step: usize, dump: PathBuf },
    #[error("no usable training samples")]
    NoSamples,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

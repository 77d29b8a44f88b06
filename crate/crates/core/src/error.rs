use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("raw label id {0} is not present in the class map")]
    UnknownRawId(u32),
    #[error("class map: {0}")]
    ClassMap(String),
    #[error("pose is not a rigid transform: {0}")]
    InvalidPose(String),
    #[error("point {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },
    #[error("frame has no points")]
    EmptyFrame,
    #[error("cannot build a spatial index over zero points")]
    EmptyInput,
    #[error("requested {k} neighbors but only {n} points are indexed")]
    KTooLarge { k: usize, n: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("prototype bank has no seen classes")]
    NoSeenClasses,
    #[error("vector norm {0:e} is too small for a cosine")]
    DegenerateVector(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training sequence frame {0} carries no ground truth")]
    NoGroundTruth(u32),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },
    #[error("{poses} poses for {frames} frames")]
    PoseCountMismatch { poses: usize, frames: usize },
    #[error("checkpoint does not match the data: {0}")]
    CheckpointMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("frame {frame_id}: {source}")]
    Frame {
        frame_id: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedRecord {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::LengthMismatch { left, right })
    }
}

//! On-disk dataset format: sensors, rigs, trajectories, records, local and
//! global features, matches and the reconstructed map.
//!
//! Layout under the dataset root:
//!
//! ```text
//! sensors/sensors.txt            sensor_id, model, width, height, params...
//! sensors/rigs.txt               rig_id, sensor_id, qw, qx, qy, qz, tx, ty, tz
//! sensors/trajectories.txt       timestamp, device_id, qw, qx, qy, qz, tx, ty, tz
//! sensors/records_camera.txt     timestamp, sensor_id, image_path
//! sensors/records_depth.txt      timestamp, sensor_id, depth_path
//! sensors/records_data/<depth_path>[.meta]
//! reconstruction/keypoints/<type>/keypoints.txt + <image_path>.kpt
//! reconstruction/descriptors/<type>/descriptors.txt + <image_path>.desc
//! reconstruction/global_features/<type>/global_features.txt + <image_path>.gfeat
//! reconstruction/matches/<type>/<image_a>.overlapping/<image_b>.matches
//! reconstruction/points3d.txt    point_id, x, y, z[, r, g, b]
//! reconstruction/observations.txt point_id, keypoints_type, image_path, keypoint_idx
//! ```
//!
//! Text files start with `# <name> version 1.0` and use `", "` separators.
//! Binary payloads are little-endian float32, row-major.

mod binary;
pub mod csv;
mod io;
mod types;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use binary::{load_depth_map, save_depth_map};
pub use io::{load_dataset, parse_pose, pose_fields, save_dataset, TRAJECTORIES_FILE};
pub use types::{
    ordered_pair, Dataset, DepthImage, FeatureArray, FeatureSet, FeatureStore, KeypointMatch,
    MapPoint, Observation, PairMatches, PosedImage, ReconstructedMap, RecordKey, Rig, RigMember,
    Trajectories,
};

pub use crate::geometry::{Camera, CameraModel, Pose};

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing mandatory file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: {reason}", file.display())]
    MalformedCsv { file: PathBuf, line: usize, reason: String },
    #[error("reference to unknown sensor or rig `{0}`")]
    UnknownSensorRef(String),
    #[error("observation references missing 3D point {0}")]
    DanglingObservation(u64),
    #[error("{}: {reason}", path.display())]
    BinaryShapeMismatch { path: PathBuf, reason: String },
    #[error("{}: expected {expected} depth values, found {actual}", path.display())]
    SizeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("{}: negative depth at index {index}", path.display())]
    NegativeDepth { path: PathBuf, index: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

impl DatastoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatastoreError::Io { path: path.to_path_buf(), source }
    }
}

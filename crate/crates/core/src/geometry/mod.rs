//! Rigid transforms, pinhole projection, triangulation and epipolar geometry.
//!
//! Poses are stored world-to-camera: `x_cam = R x_world + t`.

mod camera;
mod epipolar;
mod pose;
mod triangulation;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

pub use camera::{backproject, project, Camera, CameraModel, MIN_DEPTH};
pub use epipolar::{epipolar_distance, fundamental_matrix, symmetric_epipolar_distance};
pub use pose::{compose, inverse, rotation_angle_deg, slerp, Pose};
pub use triangulation::{
    reprojection_errors, triangulate, Triangulation, View, DEGENERACY_RATIO,
};

/// Pixel coordinates.
pub type Point2 = Vector2<f64>;
/// World coordinates in meters.
pub type Point3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate geometry: rays are (nearly) parallel")]
    DegenerateGeometry,
    #[error("triangulation needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("unsupported camera model `{0}` (only SIMPLE_PINHOLE and PINHOLE)")]
    UnsupportedModel(String),
    #[error("invalid camera `{sensor_id}`: {reason}")]
    InvalidCamera { sensor_id: String, reason: String },
}

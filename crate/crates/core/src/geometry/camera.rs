use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, Point2, Point3, Pose};

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CameraModel {
    /// `(f, cx, cy)`
    SimplePinhole,
    /// `(fx, fy, cx, cy)`
    Pinhole,
}

impl CameraModel {
    pub fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }
}

impl fmt::Display for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CameraModel {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SIMPLE_PINHOLE" => Ok(CameraModel::SimplePinhole),
            "PINHOLE" => Ok(CameraModel::Pinhole),
            other => Err(GeometryError::UnsupportedModel(other.to_string())),
        }
    }
}

/// Pinhole intrinsics of one sensor. Distortion is not modelled.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub sensor_id: String,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub params: Vec<f64>,
}

impl Camera {
    pub fn pinhole(
        sensor_id: impl Into<String>,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
    ) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            model: CameraModel::Pinhole,
            width,
            height,
            params: vec![fx, fy, cx, cy],
        }
    }

    pub fn simple_pinhole(
        sensor_id: impl Into<String>,
        width: u32,
        height: u32,
        f: f64,
        cx: f64,
        cy: f64,
    ) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            model: CameraModel::SimplePinhole,
            width,
            height,
            params: vec![f, cx, cy],
        }
    }

    /// Checks parameter count, positive focal lengths and a principal point
    /// inside the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |why: &str| GeometryError::InvalidCamera {
            sensor_id: self.sensor_id.clone(),
            reason: why.to_string(),
        };
        if self.params.len() != self.model.num_params() {
            return Err(bad(&format!(
                "{} expects {} parameters, got {}",
                self.model,
                self.model.num_params(),
                self.params.len()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("image size must be positive"));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(bad("focal length must be positive"));
        }
        let (cx, cy) = (self.cx(), self.cy());
        if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
            return Err(bad("principal point outside the image"));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.params[0]
    }

    pub fn fy(&self) -> f64 {
        match self.model {
            CameraModel::SimplePinhole => self.params[0],
            CameraModel::Pinhole => self.params[1],
        }
    }

    pub fn cx(&self) -> f64 {
        match self.model {
            CameraModel::SimplePinhole => self.params[1],
            CameraModel::Pinhole => self.params[2],
        }
    }

    pub fn cy(&self) -> f64 {
        match self.model {
            CameraModel::SimplePinhole => self.params[2],
            CameraModel::Pinhole => self.params[3],
        }
    }

    pub fn calibration_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx(),
            0.0,
            self.cx(),
            0.0,
            self.fy(),
            self.cy(),
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point; `None` when it is not in front.
    pub fn project_camera_frame(&self, xc: &Point3) -> Option<Point2> {
        if xc.z <= MIN_DEPTH {
            return None;
        }
        Some(Point2::new(
            self.fx() * xc.x / xc.z + self.cx(),
            self.fy() * xc.y / xc.z + self.cy(),
        ))
    }

    /// Normalized image coordinates `(x/z, y/z, 1)` of a pixel.
    pub fn unproject(&self, px: &Point2) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx()) / self.fx(),
            (px.y - self.cy()) / self.fy(),
            1.0,
        )
    }

    /// Unit bearing vector of a pixel in the camera frame.
    pub fn bearing(&self, px: &Point2) -> Vector3<f64> {
        self.unproject(px).normalize()
    }

    pub fn contains(&self, px: &Point2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Pixel of a world point seen by `cam` at `pose`, or `None` behind the camera.
pub fn project(cam: &Camera, pose: &Pose, x: &Point3) -> Option<Point2> {
    cam.project_camera_frame(&pose.transform_point(x))
}

/// World point at camera-frame depth `depth_m` along the ray through `px`.
pub fn backproject(
    cam: &Camera,
    pose: &Pose,
    px: &Point2,
    depth_m: f64,
) -> Result<Point3, GeometryError> {
    if depth_m <= 0.0 || !depth_m.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth_m));
    }
    let xc = cam.unproject(px) * depth_m;
    Ok(pose.rotation().inverse() * (xc - pose.translation()))
}

use nalgebra::{Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::Point3;

/// Rigid world-to-camera transform: `x_cam = R(q) * x_world + t`.
///
/// The quaternion is kept with a non-negative scalar part so that files
/// written from a pose are reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(UnitQuaternion::new_normalize(rotation.into_inner())),
            translation,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components.
    ///
    /// Components whose norm is already within `1e-12` of one are kept
    /// bit-for-bit (apart from the sign flip) so that text round-trips are
    /// stable. Returns `None` for a zero or non-finite quaternion.
    pub fn from_wxyz(wxyz: [f64; 4], translation: Vector3<f64>) -> Option<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if !norm.is_finite() || norm == 0.0 || !translation.iter().all(|v| v.is_finite()) {
            return None;
        }
        let unit = if (norm - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Some(Self {
            rotation: canonical(unit),
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Pose of a camera placed at `center` with the given world-to-camera rotation.
    pub fn from_center(rotation: UnitQuaternion<f64>, center: Point3) -> Self {
        let rotation = canonical(UnitQuaternion::new_normalize(rotation.into_inner()));
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        self.rotation.to_rotation_matrix()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn transform_point(&self, x: &Point3) -> Point3 {
        self.rotation * x + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `compose(a, b)` maps `x` to `a(b(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Free-function form of [`Pose::inverse`].
pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// Angle of the relative rotation between two unit quaternions, in degrees.
///
/// Equal to `2 acos(min(1, |q1 . q2|))`, evaluated through `atan2` on the
/// relative quaternion so that small angles keep full precision.
pub fn rotation_angle_deg(q1: &UnitQuaternion<f64>, q2: &UnitQuaternion<f64>) -> f64 {
    let rel = q1.inverse() * q2;
    let v = rel.imag().norm();
    let w = rel.w.abs();
    (2.0 * v.atan2(w)).to_degrees()
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q0: &UnitQuaternion<f64>, q1: &UnitQuaternion<f64>, lambda: f64) -> UnitQuaternion<f64> {
    let a = q0.into_inner();
    let mut b = q1.into_inner();
    let mut dot = a.dot(&b);
    if dot < 0.0 {
        b = -b;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        return UnitQuaternion::new_normalize(a * (1.0 - lambda) + b * lambda);
    }
    let theta = dot.min(1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - lambda) * theta).sin() / s;
    let wb = (lambda * theta).sin() / s;
    UnitQuaternion::new_normalize(a * wa + b * wb)
}

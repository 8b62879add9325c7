use nalgebra::{Matrix3, Vector3};

use super::{Camera, Point2, Pose};

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix with `x_b^T F x_a = 0`, or `None` when the two camera
/// centers coincide.
pub fn fundamental_matrix(
    cam_a: &Camera,
    pose_a: &Pose,
    cam_b: &Camera,
    pose_b: &Pose,
) -> Option<Matrix3<f64>> {
    let rel = pose_b.compose(&pose_a.inverse());
    let t = rel.translation();
    let scale = 1.0 + pose_a.translation().norm() + pose_b.translation().norm();
    if t.norm() <= 1e-12 * scale {
        return None;
    }
    let essential = skew(t) * rel.rotation_matrix().matrix();
    let ka_inv = cam_a.calibration_matrix().try_inverse()?;
    let kb_inv = cam_b.calibration_matrix().try_inverse()?;
    Some(kb_inv.transpose() * essential * ka_inv)
}

fn line_distance(line: &Vector3<f64>, p: &Point2) -> f64 {
    let n = (line.x * line.x + line.y * line.y).sqrt();
    if n <= f64::MIN_POSITIVE {
        return 0.0;
    }
    (line.x * p.x + line.y * p.y + line.z).abs() / n
}

/// Symmetric epipolar distance under a precomputed fundamental matrix: the
/// mean of the point-to-line distances in both images.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, pa: &Point2, pb: &Point2) -> f64 {
    let xa = Vector3::new(pa.x, pa.y, 1.0);
    let xb = Vector3::new(pb.x, pb.y, 1.0);
    let line_b = f * xa;
    let line_a = f.transpose() * xb;
    0.5 * (line_distance(&line_b, pb) + line_distance(&line_a, pa))
}

/// Symmetric epipolar distance in pixels; `f64::INFINITY` when the camera
/// centers coincide and the pair carries no epipolar constraint.
pub fn epipolar_distance(
    cam_a: &Camera,
    pose_a: &Pose,
    pa: &Point2,
    cam_b: &Camera,
    pose_b: &Pose,
    pb: &Point2,
) -> f64 {
    match fundamental_matrix(cam_a, pose_a, cam_b, pose_b) {
        Some(f) => symmetric_epipolar_distance(&f, pa, pb),
        None => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Point3};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::pinhole("c", 640, 480, 500.0, 500.0, 320.0, 240.0)
    }

    #[test]
    fn consistent_projections_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = cam();
        let a = Pose::identity();
        let b = Pose::new(
            UnitQuaternion::from_euler_angles(0.02, -0.1, 0.01),
            Vector3::new(-1.0, 0.1, 0.05),
        );
        for _ in 0..200 {
            let x = Point3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..8.0),
            );
            let (Some(pa), Some(pb)) = (project(&cam, &a, &x), project(&cam, &b, &x)) else {
                continue;
            };
            assert!(epipolar_distance(&cam, &a, &pa, &cam, &b, &pb) < 1e-7);
        }
    }

    #[test]
    fn orthogonal_displacement_in_rectified_pair() {
        // Horizontal baseline with parallel axes: epipolar lines are image rows.
        let cam = cam();
        let a = Pose::identity();
        let b = Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let x = Point3::new(0.3, -0.2, 5.0);
        let pa = project(&cam, &a, &x).unwrap();
        let pb = project(&cam, &b, &x).unwrap() + Point2::new(0.0, 3.0);
        let d = epipolar_distance(&cam, &a, &pa, &cam, &b, &pb);
        assert!((d - 3.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn orthogonal_displacement_general_pair() {
        let cam = cam();
        let a = Pose::identity();
        let b = Pose::new(
            UnitQuaternion::from_euler_angles(0.0, -0.05, 0.0),
            Vector3::new(-0.8, 0.0, 0.1),
        );
        let x = Point3::new(0.3, -0.2, 6.0);
        let pa = project(&cam, &a, &x).unwrap();
        let pb = project(&cam, &b, &x).unwrap();
        let f = fundamental_matrix(&cam, &a, &cam, &b).unwrap();
        let line = f * Vector3::new(pa.x, pa.y, 1.0);
        let normal = Point2::new(line.x, line.y).normalize();
        let d = epipolar_distance(&cam, &a, &pa, &cam, &b, &(pb + normal * 3.0));
        assert!((d - 3.0).abs() < 0.3, "{d}");
    }

    #[test]
    fn identical_poses_have_no_constraint() {
        let cam = cam();
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let d = epipolar_distance(
            &cam,
            &p,
            &Point2::new(10.0, 10.0),
            &cam,
            &p,
            &Point2::new(300.0, 20.0),
        );
        assert_eq!(d, f64::INFINITY);
    }
}

use nalgebra::{Matrix2x3, Matrix6, UnitQuaternion, Vector3, Vector6};

use super::Correspondence2D3D;
use crate::geometry::{Camera, Pose, MIN_DEPTH};

const MAX_ITERATIONS: usize = 50;
const INITIAL_LAMBDA: f64 = 1e-3;
const MAX_LAMBDA: f64 = 1e12;

/// Total squared reprojection error; infinite when a point is behind the
/// camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence2D3D], cam: &Camera) -> f64 {
    let mut cost = 0.0;
    for c in corrs {
        match cam.project_camera_frame(&pose.transform_point(&c.xyz)) {
            Some(p) => cost += (p - c.pixel).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Applies a left increment `(omega, dt)`: `x -> exp(omega)(R x + t) + dt`.
fn apply(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dr = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(dr * pose.rotation(), dr * pose.translation() + dt)
}

fn normal_equations(pose: &Pose, corrs: &[Correspondence2D3D], cam: &Camera) -> (Matrix6<f64>, Vector6<f64>) {
    let (fx, fy) = (cam.fx(), cam.fy());
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        let x = pose.transform_point(&c.xyz);
        if x.z <= MIN_DEPTH {
            continue;
        }
        let iz = 1.0 / x.z;
        let r = nalgebra::Vector2::new(fx * x.x * iz + cam.cx() - c.pixel.x, fy * x.y * iz + cam.cy() - c.pixel.y);
        let dp = Matrix2x3::new(fx * iz, 0.0, -fx * x.x * iz * iz, 0.0, fy * iz, -fy * x.y * iz * iz);
        // d(exp(w) X)/dw = -[X]x
        let skew = x.cross_matrix();
        let mut j = nalgebra::Matrix2x6::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dp * -skew));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dp);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    (h, g)
}

/// Levenberg-Marquardt polish of `initial` on the total squared reprojection
/// error. Returns the pose and the cost after each accepted step (the first
/// entry is the initial cost); the cost sequence never increases.
pub fn refine_pose_trace(initial: &Pose, corrs: &[Correspondence2D3D], cam: &Camera) -> (Pose, Vec<f64>) {
    let mut pose = *initial;
    let mut cost = reprojection_cost(&pose, corrs, cam);
    let mut trace = vec![cost];
    if corrs.len() < 4 || !cost.is_finite() || cost == 0.0 {
        return (pose, trace);
    }
    let mut lambda = INITIAL_LAMBDA;
    for _ in 0..MAX_ITERATIONS {
        let (h, g) = normal_equations(&pose, corrs, cam);
        let mut improved = false;
        while lambda <= MAX_LAMBDA {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = apply(&pose, &step);
            let c = reprojection_cost(&candidate, corrs, cam);
            if c < cost {
                let rel = (cost - c) / cost;
                pose = candidate;
                cost = c;
                trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-14 && step.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (pose, trace)
}

/// [`refine_pose_trace`] without the cost history.
pub fn refine_pose(initial: &Pose, corrs: &[Correspondence2D3D], cam: &Camera) -> Pose {
    refine_pose_trace(initial, corrs, cam).0
}

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector3};

use super::{project, Camera, GeometryError, Point2, Point3, Pose, MIN_DEPTH};

/// Ratio `sigma_min / sigma_second` of the linear system above which the rays
/// are treated as parallel.
pub const DEGENERACY_RATIO: f64 = 0.99;
const MAX_GN_ITERATIONS: usize = 10;
const GN_STEP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub pose: &'a Pose,
    pub pixel: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub point: Point3,
    /// Reprojection error of `point` in every input view, in pixels.
    pub residuals: Vec<f64>,
}

impl Triangulation {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Linear (DLT) triangulation refined by Gauss-Newton on the total squared
/// reprojection error.
pub fn triangulate(views: &[View<'_>]) -> Result<Triangulation, GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::TooFewViews(views.len()));
    }
    let x0 = linear_triangulation(views)?;
    let point = gauss_newton(views, x0);
    if views
        .iter()
        .any(|v| v.pose.transform_point(&point).z <= MIN_DEPTH)
    {
        return Err(GeometryError::DegenerateGeometry);
    }
    let residuals = reprojection_errors(views, &point);
    Ok(Triangulation { point, residuals })
}

pub fn reprojection_errors(views: &[View<'_>], point: &Point3) -> Vec<f64> {
    views
        .iter()
        .map(|v| match project(v.camera, v.pose, point) {
            Some(p) => (p - v.pixel).norm(),
            None => f64::INFINITY,
        })
        .collect()
}

fn linear_triangulation(views: &[View<'_>]) -> Result<Point3, GeometryError> {
    // Work relative to the mean camera center for conditioning.
    let origin = views
        .iter()
        .map(|v| v.pose.center())
        .fold(Vector3::zeros(), |acc, c| acc + c)
        / views.len() as f64;

    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, v) in views.iter().enumerate() {
        let r = v.pose.rotation_matrix();
        let r = r.matrix();
        let t = v.pose.translation() + r * origin;
        let xn = v.camera.unproject(&v.pixel);
        for (k, coord) in [xn.x, xn.y].into_iter().enumerate() {
            let mut row = [0.0; 4];
            for c in 0..3 {
                row[c] = coord * r[(2, c)] - r[(k, c)];
            }
            row[3] = coord * t.z - t[k];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (c, value) in row.iter().enumerate() {
                    a[(2 * i + k, c)] = value / norm;
                }
            }
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateGeometry)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let (largest, second_smallest, smallest) = (sv(0), sv(2), sv(3));
    if second_smallest <= 1e-12 * largest || smallest / second_smallest > DEGENERACY_RATIO {
        return Err(GeometryError::DegenerateGeometry);
    }
    let h = v_t.row(order[3]);
    if h[3].abs() <= 1e-12 * h.norm() {
        return Err(GeometryError::DegenerateGeometry);
    }
    let x = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]) + origin;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(x)
}

fn cost(views: &[View<'_>], x: &Point3) -> f64 {
    reprojection_errors(views, x).iter().map(|e| e * e).sum()
}

fn gauss_newton(views: &[View<'_>], mut x: Point3) -> Point3 {
    let mut current = cost(views, &x);
    for _ in 0..MAX_GN_ITERATIONS {
        if !current.is_finite() {
            break;
        }
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for v in views {
            let r = v.pose.rotation_matrix();
            let xc = v.pose.transform_point(&x);
            let (fx, fy) = (v.camera.fx(), v.camera.fy());
            let iz = 1.0 / xc.z;
            let d_proj = Matrix2x3::new(
                fx * iz,
                0.0,
                -fx * xc.x * iz * iz,
                0.0,
                fy * iz,
                -fy * xc.y * iz * iz,
            );
            let j = d_proj * r.matrix();
            let p = v.camera.project_camera_frame(&xc).unwrap_or(v.pixel);
            let res = p - v.pixel;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        let candidate = x + step;
        let next = cost(views, &candidate);
        if !(next <= current) {
            break;
        }
        x = candidate;
        current = next;
        if step.norm() < GN_STEP_TOLERANCE {
            break;
        }
    }
    x
}

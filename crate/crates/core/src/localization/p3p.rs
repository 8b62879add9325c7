use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::{Correspondence2D3D, LocalizationError};
use crate::geometry::{project, Camera, Point3, Pose};

/// Polishing iterations on the distance equations.
const POLISH_ITERATIONS: usize = 8;

fn horner(poly: &[f64], x: f64) -> f64 {
    poly.iter().fold(0.0, |acc, a| acc * x + a)
}

/// Real roots of a polynomial with coefficients from the highest degree
/// down and a nonzero leading term. The derivative's roots split the real
/// line into monotone pieces, each bisected where the sign changes.
/// Stationary points where the polynomial nearly vanishes are reported
/// too, so double roots survive rounding.
fn real_roots(poly: &[f64]) -> Vec<f64> {
    let n = poly.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![-poly[1] / poly[0]];
    }
    let bound = 1.0 + poly[1..].iter().fold(0.0f64, |m, a| m.max((a / poly[0]).abs()));
    let deriv: Vec<f64> = poly[..n].iter().enumerate().map(|(i, a)| a * (n - i) as f64).collect();
    let scale = poly.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut knots = vec![-bound];
    knots.extend(real_roots(&deriv).into_iter().filter(|x| x.abs() < bound));
    knots.push(bound);
    let mut roots: Vec<f64> = Vec::new();
    for w in knots.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (horner(poly, lo), horner(poly, hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo.signum() == fhi.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if horner(poly, mid).signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    if horner(poly, bound) == 0.0 {
        roots.push(bound);
    }
    for w in knots[1..knots.len() - 1].iter() {
        let tol = 1e-10 * scale * (1.0 + w.abs()).powi(n as i32);
        if horner(poly, *w).abs() <= tol && !roots.iter().any(|r| (r - w).abs() < 1e-9 * (1.0 + w.abs())) {
            roots.push(*w);
        }
    }
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    roots
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`, also
/// when leading coefficients vanish.
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = c.iter().map(|x| x / scale).collect();
    let lead = c.iter().position(|x| x.abs() > 1e-14).unwrap_or(4);
    real_roots(&c[lead..])
}

/// Gauss-Newton on the three law-of-cosines equations in the ray lengths.
fn polish(s: &mut [f64; 3], cos: [f64; 3], d2: [f64; 3]) -> f64 {
    // Equation k couples rays (i, j) with squared side d2[k] and cosine cos[k].
    const IDX: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
    let residual = |s: &[f64; 3]| {
        let mut r = Vector3::zeros();
        for (k, (i, j)) in IDX.iter().enumerate() {
            r[k] = s[*i] * s[*i] + s[*j] * s[*j] - 2.0 * s[*i] * s[*j] * cos[k] - d2[k];
        }
        r
    };
    for _ in 0..POLISH_ITERATIONS {
        let r = residual(s);
        let mut jac = Matrix3::zeros();
        for (k, (i, j)) in IDX.iter().enumerate() {
            jac[(k, *i)] = 2.0 * s[*i] - 2.0 * s[*j] * cos[k];
            jac[(k, *j)] = 2.0 * s[*j] - 2.0 * s[*i] * cos[k];
        }
        let Some(step) = jac.lu().solve(&r) else { break };
        let next = [s[0] - step[0], s[1] - step[1], s[2] - step[2]];
        if residual(&next).norm() > r.norm() {
            break;
        }
        *s = next;
    }
    let scale = d2.iter().fold(0.0f64, |m, x| m.max(*x));
    residual(s).norm() / scale
}

/// Orthonormal frame attached to a triangle.
fn triangle_frame(p: &[Point3; 3]) -> Option<Matrix3<f64>> {
    let e1 = (p[1] - p[0]).try_normalize(1e-300)?;
    let e3 = e1.cross(&(p[2] - p[0])).try_normalize(1e-300)?;
    let e2 = e3.cross(&e1);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

fn pose_from_lengths(j: &[Vector3<f64>; 3], s: [f64; 3], world: &[Point3; 3], frame_w: &Matrix3<f64>) -> Option<Pose> {
    let cam_pts = [j[0] * s[0], j[1] * s[1], j[2] * s[2]];
    let frame_c = triangle_frame(&cam_pts)?;
    let r = frame_c * frame_w.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&r));
    let t = cam_pts[0] - rot * world[0];
    Some(Pose::new(rot, t))
}

/// Poses consistent with three 2D-3D correspondences, by Grunert's
/// reduction to a quartic in the ratio of two ray lengths.
pub fn solve_p3p(c: &[Correspondence2D3D], cam: &Camera) -> Result<Vec<Pose>, LocalizationError> {
    if c.len() != 3 {
        return Err(LocalizationError::InvalidInput(format!("P3P needs 3 correspondences, got {}", c.len())));
    }
    let world = [c[0].xyz, c[1].xyz, c[2].xyz];
    let e12 = world[1] - world[0];
    let e13 = world[2] - world[0];
    if e12.cross(&e13).norm() <= 1e-9 * e12.norm() * e13.norm() {
        return Err(LocalizationError::CollinearPoints);
    }
    let j = [cam.bearing(&c[0].pixel), cam.bearing(&c[1].pixel), cam.bearing(&c[2].pixel)];
    let (ca, cb, cg) = (j[1].dot(&j[2]), j[0].dot(&j[2]), j[0].dot(&j[1]));
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let m = (a2 - c2) / b2;
    let p = (a2 + c2) / b2;
    let coeffs = [
        (m - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (m * (1.0 - m) * cb - (1.0 - p) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (m * m - 1.0 + 2.0 * m * m * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * p * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-m * (1.0 + m) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - p) * ca * cg),
        (1.0 + m).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let frame_w = triangle_frame(&world).ok_or(LocalizationError::CollinearPoints)?;

    let mut poses: Vec<Pose> = Vec::new();
    for v in quartic_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let den = 1.0 + v * v - 2.0 * v * cb;
        if den <= 0.0 {
            continue;
        }
        let s1 = (b2 / den).sqrt();
        // u = s2/s1 in closed form from v; the roots of the c^2 equation
        // u^2 - 2u cos(gamma) + 1 - c^2/s1^2 = 0 back it up when the closed
        // form is ill-conditioned. Polishing and the reprojection check
        // below sort out the candidates.
        let mut roots_u = Vec::with_capacity(3);
        let u_den = 2.0 * (cg - v * ca);
        if u_den.abs() > 1e-12 {
            roots_u.push(((m - 1.0) * v * v - 2.0 * m * cb * v + 1.0 + m) / u_den);
        }
        let disc = cg * cg - 1.0 + c2 / (s1 * s1);
        if disc >= 0.0 {
            roots_u.extend([cg + disc.sqrt(), cg - disc.sqrt()]);
        } else {
            roots_u.push(cg);
        }
        for u in roots_u {
            if u <= 0.0 {
                continue;
            }
            let mut s = [s1, u * s1, v * s1];
            let res = polish(&mut s, [ca, cb, cg], [a2, b2, c2]);
            if res > 1e-6 || s.iter().any(|x| *x <= 0.0) {
                continue;
            }
            if let Some(pose) = pose_from_lengths(&j, s, &world, &frame_w) {
                let consistent =
                    c.iter().all(|x| project(cam, &pose, &x.xyz).is_some_and(|px| (px - x.pixel).norm() < 1e-6));
                let duplicate = poses.iter().any(|q| {
                    (q.translation() - pose.translation()).norm() < 1e-9
                        && q.rotation().angle_to(pose.rotation()) < 1e-9
                });
                if consistent && !duplicate {
                    poses.push(pose);
                }
            }
        }
    }
    if poses.is_empty() {
        return Err(LocalizationError::NoRealSolution);
    }
    Ok(poses)
}

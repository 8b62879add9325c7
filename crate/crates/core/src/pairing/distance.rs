use rayon::prelude::*;

use crate::datastore::PosedImage;
use crate::geometry::{rotation_angle_deg, Pose};

use super::{top_k, PairList, PairingError};

#[derive(Debug, Clone, PartialEq)]
pub struct DistancePairingParams {
    /// Center distance normalizer, meters.
    pub tau_c: f64,
    /// Rotation angle normalizer, degrees.
    pub tau_r: f64,
    pub k: usize,
}

impl Default for DistancePairingParams {
    fn default() -> Self {
        Self { tau_c: 25.0, tau_r: 45.0, k: 20 }
    }
}

impl DistancePairingParams {
    pub fn validate(&self) -> Result<(), PairingError> {
        if !(self.tau_c > 0.0 && self.tau_r > 0.0) {
            return Err(PairingError::InvalidParams("tau_c and tau_r must be positive".into()));
        }
        if self.k == 0 {
            return Err(PairingError::InvalidParams("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `‖c_a − c_b‖ / τ_c + angle(R_a, R_b) / τ_R`; lower is closer.
pub fn distance_score(a: &Pose, b: &Pose, params: &DistancePairingParams) -> f64 {
    let dc = (a.center() - b.center()).norm();
    let dr = rotation_angle_deg(a.rotation(), b.rotation());
    dc / params.tau_c + dr / params.tau_r
}

fn pose_of(img: &PosedImage) -> Result<&Pose, PairingError> {
    img.pose.as_ref().ok_or_else(|| PairingError::MissingPose(img.path.clone()))
}

/// Top-`k` database images per query by ascending pose distance score.
pub fn distance_pairs(
    queries: &[PosedImage],
    db: &[PosedImage],
    params: &DistancePairingParams,
) -> Result<PairList, PairingError> {
    params.validate()?;
    let db_poses: Vec<(&str, &Pose)> =
        db.iter().map(|d| Ok((d.path.as_str(), pose_of(d)?))).collect::<Result<_, PairingError>>()?;
    let mut order: Vec<&PosedImage> = queries.iter().collect();
    order.sort_by(|a, b| a.path.cmp(&b.path));
    let ranked: Vec<Vec<(String, f64)>> = order
        .par_iter()
        .map(|q| {
            let qp = pose_of(q)?;
            let cands = db_poses
                .iter()
                .filter(|(path, _)| *path != q.path)
                .map(|(path, p)| (path.to_string(), distance_score(qp, p, params)))
                .collect();
            Ok(top_k(cands, params.k, false))
        })
        .collect::<Result<_, PairingError>>()?;
    let mut list = PairList::new();
    for (q, r) in order.iter().zip(ranked) {
        for (path, s) in r {
            list.push(q.path.clone(), path, s);
        }
    }
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(path: &str, pose: Option<Pose>) -> PosedImage {
        PosedImage { path: path.into(), camera: Camera::pinhole("c", 64, 48, 50.0, 50.0, 32.0, 24.0), pose }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0));
        let t = Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        Pose::new(q, t)
    }

    #[test]
    fn identical_pose_ranks_first_with_zero_score() {
        let p = Pose::new(UnitQuaternion::from_euler_angles(0.3, 0.1, -0.2), Vector3::new(1.0, 2.0, 3.0));
        let far = Pose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let pairs = distance_pairs(
            &[img("q", Some(p))],
            &[img("a", Some(far)), img("b", Some(p))],
            &DistancePairingParams::default(),
        )
        .unwrap();
        assert_eq!(pairs.pairs[0].image_b, "b");
        assert_eq!(pairs.pairs[0].score, 0.0);
    }

    #[test]
    fn default_thresholds_sum_to_two() {
        let a = Pose::identity();
        let b = Pose::from_center(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 45f64.to_radians()),
            Vector3::new(0.0, 25.0, 0.0),
        );
        let s = distance_score(&a, &b, &DistancePairingParams::default());
        assert!((s - 2.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn missing_pose_is_reported() {
        let r = distance_pairs(&[img("q", None)], &[img("a", Some(Pose::identity()))], &DistancePairingParams::default());
        assert_eq!(r, Err(PairingError::MissingPose("q".into())));
    }

    #[test]
    fn ranking_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let db: Vec<PosedImage> = (0..50).map(|i| img(&format!("db{i:02}"), Some(random_pose(&mut rng)))).collect();
        let q = img("q", Some(random_pose(&mut rng)));
        let params = DistancePairingParams { k: 50, ..Default::default() };
        let pairs = distance_pairs(std::slice::from_ref(&q), &db, &params).unwrap();
        // Oracle: center distance and angle via rotation matrices.
        let qp = q.pose.unwrap();
        let mut scores: Vec<(f64, &str)> = db
            .iter()
            .map(|d| {
                let p = d.pose.unwrap();
                let dc = (qp.center() - p.center()).norm();
                let rel = qp.rotation_matrix().matrix().transpose() * p.rotation_matrix().matrix();
                let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
                (dc / 25.0 + cos.acos().to_degrees() / 45.0, d.path.as_str())
            })
            .collect();
        scores.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (p, (s, name)) in pairs.pairs.iter().zip(&scores) {
            assert_eq!(p.image_b, *name);
            assert!((p.score - s).abs() < 1e-7);
        }
    }

    #[test]
    fn invariant_to_global_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = DistancePairingParams::default();
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let g = random_pose(&mut rng);
            // Moving the world by g maps a world-to-camera pose P to P ∘ g⁻¹.
            let ga = a.compose(&g.inverse());
            let gb = b.compose(&g.inverse());
            let d0 = distance_score(&a, &b, &params);
            let d1 = distance_score(&ga, &gb, &params);
            assert!((d0 - d1).abs() < 1e-9, "{d0} {d1}");
        }
    }
}

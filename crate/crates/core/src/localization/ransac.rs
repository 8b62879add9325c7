use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{refine_pose, solve_p3p, Correspondence2D3D, PnPConfig};
use crate::geometry::{project, Camera, Pose};

/// Outcome of the consensus search before the inlier gates are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacEstimate {
    pub pose: Pose,
    /// Indices into the correspondence list, ascending.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn inliers_of(pose: &Pose, corrs: &[Correspondence2D3D], cam: &Camera, max_error: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Some(p) = project(cam, pose, &c.xyz) {
            let e = (p - c.pixel).norm();
            if e <= max_error {
                idx.push(i);
                sum += e;
            }
        }
    }
    let mean = if idx.is_empty() { f64::INFINITY } else { sum / idx.len() as f64 };
    (idx, mean)
}

/// Iterations needed to draw one all-inlier sample with probability
/// `confidence` when a fraction `w` of the data are inliers.
pub fn required_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    let p = w.powi(3);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() && n < cap as f64 {
        (n as usize).max(1)
    } else {
        cap
    }
}

/// P3P hypotheses on seeded uniform samples; the pose with most inliers wins,
/// ties going to the lower mean inlier error. The winner is refined on its
/// inliers and the inlier set recomputed once.
pub fn ransac_estimate(corrs: &[Correspondence2D3D], cam: &Camera, cfg: &PnPConfig) -> Option<RansacEstimate> {
    let n = corrs.len();
    if n < 3 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let s = sample(&mut rng, n, 3);
        let triple = [corrs[s.index(0)], corrs[s.index(1)], corrs[s.index(2)]];
        let Ok(candidates) = solve_p3p(&triple, cam) else { continue };
        for pose in candidates {
            let (idx, mean) = inliers_of(&pose, corrs, cam, cfg.max_error_px);
            let better = match &best {
                None => !idx.is_empty(),
                Some((_, bi, bm)) => idx.len() > bi.len() || (idx.len() == bi.len() && mean < *bm),
            };
            if better {
                needed = required_iterations(idx.len() as f64 / n as f64, cfg.confidence, cfg.max_iterations);
                best = Some((pose, idx, mean));
            }
        }
    }
    let (pose, inliers, _) = best?;
    let (pose, inliers) = if inliers.len() >= 4 {
        let subset: Vec<Correspondence2D3D> = inliers.iter().map(|i| corrs[*i]).collect();
        let refined = refine_pose(&pose, &subset, cam);
        (refined, inliers_of(&refined, corrs, cam, cfg.max_error_px).0)
    } else {
        (pose, inliers)
    };
    Some(RansacEstimate { pose, inliers, iterations: it })
}

/// Robust absolute pose: [`ransac_estimate`] followed by the inlier-count
/// and inlier-ratio gates of `cfg`.
pub fn ransac_pnp(corrs: &[Correspondence2D3D], cam: &Camera, cfg: &PnPConfig) -> Option<(Pose, Vec<usize>)> {
    let est = ransac_estimate(corrs, cam, cfg)?;
    cfg.accepts(est.inliers.len(), corrs.len()).then_some((est.pose, est.inliers))
}

use rayon::prelude::*;

use crate::datastore::PosedImage;
use crate::geometry::{Camera, Point2, Point3, Pose};

use super::{top_k, PairList, PairingError};

#[derive(Debug, Clone, PartialEq)]
pub struct FrustumParams {
    pub near: f64,
    pub far: f64,
    /// Samples along image width, image height and depth.
    pub grid: (usize, usize, usize),
    pub k: usize,
}

impl Default for FrustumParams {
    fn default() -> Self {
        Self { near: 0.1, far: 50.0, grid: (8, 6, 8), k: 20 }
    }
}

impl FrustumParams {
    pub fn validate(&self) -> Result<(), PairingError> {
        let (nu, nv, nd) = self.grid;
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(PairingError::InvalidParams("need 0 < near < far".into()));
        }
        if nu == 0 || nv == 0 || nd == 0 || self.k == 0 {
            return Err(PairingError::InvalidParams("grid sizes and k must be positive".into()));
        }
        Ok(())
    }

    fn depths(&self) -> Vec<f64> {
        let nd = self.grid.2;
        if nd == 1 {
            return vec![(self.near * self.far).sqrt()];
        }
        let ratio = (self.far / self.near).ln();
        (0..nd).map(|i| self.near * (ratio * i as f64 / (nd - 1) as f64).exp()).collect()
    }
}

/// World points sampled on a regular grid inside the camera's frustum.
fn frustum_samples(cam: &Camera, pose: &Pose, params: &FrustumParams) -> Vec<Point3> {
    let (nu, nv, _) = params.grid;
    let inv = pose.inverse();
    let depths = params.depths();
    let mut out = Vec::with_capacity(nu * nv * depths.len());
    for j in 0..nv {
        for i in 0..nu {
            let px = Point2::new(
                (i as f64 + 0.5) * cam.width as f64 / nu as f64,
                (j as f64 + 0.5) * cam.height as f64 / nv as f64,
            );
            let ray = cam.unproject(&px);
            for d in &depths {
                out.push(inv.transform_point(&(ray * *d)));
            }
        }
    }
    out
}

fn fraction_visible(samples: &[Point3], cam: &Camera, pose: &Pose, params: &FrustumParams) -> f64 {
    // Relative slack so samples at exactly near/far survive rounding.
    let (lo, hi) = (params.near * (1.0 - 1e-9), params.far * (1.0 + 1e-9));
    let visible = samples
        .iter()
        .filter(|x| {
            let xc = pose.transform_point(x);
            xc.z >= lo && xc.z <= hi && cam.project_camera_frame(&xc).is_some_and(|p| cam.contains(&p))
        })
        .count();
    visible as f64 / samples.len() as f64
}

/// Mean of the fractions of each frustum's samples visible in the other.
pub fn frustum_overlap(
    a: (&Camera, &Pose),
    b: (&Camera, &Pose),
    params: &FrustumParams,
) -> f64 {
    let sa = frustum_samples(a.0, a.1, params);
    let sb = frustum_samples(b.0, b.1, params);
    0.5 * (fraction_visible(&sa, b.0, b.1, params) + fraction_visible(&sb, a.0, a.1, params))
}

/// Mapping shortlist: each image's `k` most overlapping partners,
/// symmetric-deduplicated.
pub fn frustum_pairs(images: &[PosedImage], params: &FrustumParams) -> Result<PairList, PairingError> {
    params.validate()?;
    let mut order: Vec<(&str, &Camera, &Pose)> = images
        .iter()
        .map(|im| {
            let pose = im.pose.as_ref().ok_or_else(|| PairingError::MissingPose(im.path.clone()))?;
            Ok((im.path.as_str(), &im.camera, pose))
        })
        .collect::<Result<_, PairingError>>()?;
    order.sort_by(|a, b| a.0.cmp(b.0));
    let samples: Vec<Vec<Point3>> =
        order.par_iter().map(|(_, cam, pose)| frustum_samples(cam, pose, params)).collect();
    let n = order.len();
    // visible[i][j]: fraction of i's samples seen by j.
    let visible: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 1.0 } else { fraction_visible(&samples[i], order[j].1, order[j].2, params) })
                .collect()
        })
        .collect();
    let mut list = PairList::new();
    for i in 0..n {
        let cands = (0..n)
            .filter(|j| *j != i)
            .map(|j| (order[j].0.to_string(), 0.5 * (visible[i][j] + visible[j][i])))
            .collect();
        for (path, s) in top_k(cands, params.k, true) {
            list.push(order[i].0, path, s);
        }
    }
    Ok(list.dedup_symmetric())
}

//! Exhaustive descriptor matching, epipolar verification and track building.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use thiserror::Error;

use crate::datastore::{ordered_pair, FeatureArray, FeatureSet, KeypointMatch, PairMatches};
use crate::pairing::PairList;
use crate::profile::Profile;
use crate::geometry::{fundamental_matrix, symmetric_epipolar_distance, Camera, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchingError {
    #[error("descriptor dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no local features for image `{0}`")]
    MissingFeatures(String),
    #[error("invalid matching parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchParams {
    pub mutual_check: bool,
    /// Lowe ratio: keep a match only if its distance is below `ratio` times
    /// the second-best distance.
    pub ratio: Option<f64>,
    /// Maximum symmetric epipolar distance, pixels.
    pub epipolar_px: f64,
}

impl MatchParams {
    pub fn config1() -> Self {
        Self { mutual_check: true, ratio: None, epipolar_px: 4.0 }
    }

    pub fn config2() -> Self {
        Self { epipolar_px: 12.0, ..Self::config1() }
    }

    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Config1 => Self::config1(),
            Profile::Config2 => Self::config2(),
        }
    }

    pub fn validate(&self) -> Result<(), MatchingError> {
        if let Some(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(MatchingError::InvalidParams(format!("ratio {r} outside (0, 1]")));
            }
        }
        if !(self.epipolar_px > 0.0) {
            return Err(MatchingError::InvalidParams("epipolar_px must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MatchParams {
    fn default() -> Self {
        Self::config1()
    }
}

/// L2 nearest-neighbour matching from `desc_a` to `desc_b`. Scores are L2
/// distances; output is sorted by `idx_a`. Ties go to the lower index.
pub fn match_descriptors(
    desc_a: &FeatureArray,
    desc_b: &FeatureArray,
    params: &MatchParams,
) -> Result<Vec<KeypointMatch>, MatchingError> {
    if desc_a.cols() != desc_b.cols() {
        return Err(MatchingError::DimensionMismatch { expected: desc_a.cols(), got: desc_b.cols() });
    }
    let (na, nb) = (desc_a.rows(), desc_b.rows());
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    // Squared distances as |a|^2 + |b|^2 - 2 a.b, the cross term as one
    // matrix product. Column i holds the distances from a_i to every b_j.
    let d = desc_a.cols();
    let a = DMatrix::from_row_slice(na, d, desc_a.data());
    let b = DMatrix::from_row_slice(nb, d, desc_b.data());
    let cross = &b * a.transpose();
    let norms_a: Vec<f32> = desc_a.iter_rows().map(|r| r.iter().map(|x| x * x).sum()).collect();
    let norms_b: Vec<f32> = desc_b.iter_rows().map(|r| r.iter().map(|x| x * x).sum()).collect();
    // One sequential pass: best two per a_i, best a_i per b_j.
    let mut forward = Vec::with_capacity(na);
    let mut reverse = vec![(usize::MAX, f32::INFINITY); nb];
    for (i, na2) in norms_a.iter().enumerate() {
        let column = cross.column(i);
        let dists = column.iter().zip(&norms_b).map(|(c, nb2)| (na2 + nb2 - 2.0 * c).max(0.0));
        let (mut bj, mut b1, mut b2) = (usize::MAX, f32::INFINITY, f32::INFINITY);
        for (j, v) in dists.enumerate() {
            if v < b1 {
                b2 = b1;
                b1 = v;
                bj = j;
            } else if v < b2 {
                b2 = v;
            }
            if v < reverse[j].1 {
                reverse[j] = (i, v);
            }
        }
        forward.push((bj, b1, b2));
    }
    let mut out = Vec::new();
    for (i, (j, d1, d2)) in forward.into_iter().enumerate() {
        if params.mutual_check && reverse[j].0 != i {
            continue;
        }
        if let Some(r) = params.ratio {
            if nb > 1 && !((d1 as f64).sqrt() < r * (d2 as f64).sqrt()) {
                continue;
            }
        }
        let exact: f32 = desc_a.row(i).iter().zip(desc_b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        out.push(KeypointMatch { idx_a: i, idx_b: j, score: exact.sqrt() });
    }
    Ok(out)
}

/// Keeps matches whose symmetric epipolar distance is at most `epipolar_px`.
/// A zero-baseline pair constrains nothing and keeps every match.
#[allow(clippy::too_many_arguments)]
pub fn verify_matches_epipolar(
    matches: &[KeypointMatch],
    cam_a: &Camera,
    pose_a: &Pose,
    cam_b: &Camera,
    pose_b: &Pose,
    kpts_a: &FeatureArray,
    kpts_b: &FeatureArray,
    epipolar_px: f64,
) -> Vec<KeypointMatch> {
    let Some(f) = fundamental_matrix(cam_a, pose_a, cam_b, pose_b) else {
        return matches.to_vec();
    };
    matches
        .iter()
        .filter(|m| {
            let d = symmetric_epipolar_distance(&f, &kpts_a.keypoint(m.idx_a), &kpts_b.keypoint(m.idx_b));
            d <= epipolar_px
        })
        .copied()
        .collect()
}

/// Matches every listed `(image_a, image_b)` pair in parallel. Output follows
/// the input order.
pub fn match_pairs<'a>(
    desc_a: &FeatureSet,
    desc_b: &FeatureSet,
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    params: &MatchParams,
) -> Result<Vec<Vec<KeypointMatch>>, MatchingError> {
    params.validate()?;
    let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
    pairs
        .par_iter()
        .map(|(a, b)| {
            let da = desc_a.get(a).ok_or_else(|| MatchingError::MissingFeatures(a.to_string()))?;
            let db = desc_b.get(b).ok_or_else(|| MatchingError::MissingFeatures(b.to_string()))?;
            match_descriptors(da, db, params)
        })
        .collect()
}

/// Matches every unordered pair of a shortlist within one feature set, stored
/// in on-disk orientation.
pub fn match_image_pairs(
    descriptors: &FeatureSet,
    pairs: &PairList,
    params: &MatchParams,
) -> Result<PairMatches, MatchingError> {
    let pairs = pairs.clone().dedup_symmetric();
    let keys: Vec<(String, String)> = pairs.iter().map(|p| ordered_pair(&p.image_a, &p.image_b).0).collect();
    let matches = match_pairs(
        descriptors,
        descriptors,
        keys.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        params,
    )?;
    Ok(keys.into_iter().zip(matches).collect())
}

/// Keypoints across images that see the same 3D point, one per image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Track {
    /// Sorted `(image_path, keypoint_idx)` members.
    pub members: Vec<(String, usize)>,
}

impl Track {
    pub fn num_images(&self) -> usize {
        self.members.len()
    }
}

/// Connected components of the match graph. Components with two keypoints of
/// one image, or spanning fewer than two images, are dropped. Tracks come out
/// sorted.
pub fn build_tracks<'a>(
    matches: impl IntoIterator<Item = (&'a str, &'a str, &'a [KeypointMatch])>,
) -> Vec<Track> {
    let mut ids: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    let mut edges = Vec::new();
    for (a, b, ms) in matches {
        for m in ms {
            let n = ids.len();
            let ia = *ids.entry((a, m.idx_a)).or_insert(n);
            let n = ids.len();
            let ib = *ids.entry((b, m.idx_b)).or_insert(n);
            edges.push((ia, ib));
        }
    }
    let mut uf = UnionFind::<usize>::new(ids.len());
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut comps: BTreeMap<usize, Vec<(&str, usize)>> = BTreeMap::new();
    for (node, id) in &ids {
        comps.entry(uf.find(*id)).or_default().push(*node);
    }
    let mut tracks: Vec<Track> = comps
        .into_values()
        .filter_map(|nodes| {
            let images: BTreeSet<&str> = nodes.iter().map(|(img, _)| *img).collect();
            (images.len() == nodes.len() && images.len() >= 2).then(|| Track {
                members: nodes.into_iter().map(|(img, k)| (img.to_string(), k)).collect(),
            })
        })
        .collect();
    tracks.sort();
    tracks
}

//! Map building from known training poses: multi-view triangulation of
//! matched keypoints, or back-projection of keypoints through depth maps.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{Dataset, FeatureArray, KeypointMatch, MapPoint, ReconstructedMap};
use crate::geometry::{backproject, triangulate, Camera, Point3, Pose, View};
use crate::matching::{build_tracks, match_descriptors, verify_matches_epipolar, MatchParams, MatchingError};
use crate::pairing::PairList;
use crate::profile::Profile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error("image `{0}` has no pose")]
    MissingPose(String),
    #[error("image `{0}` has no depth map")]
    MissingDepth(String),
    #[error("no local features: {0}")]
    MissingFeatures(String),
    #[error("invalid mapper parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Pairs with fewer verified matches contribute nothing.
    pub min_num_matches: usize,
    /// Points whose largest reprojection error exceeds this are dropped, pixels.
    pub filter_max_reproj_error: f64,
}

impl MapperConfig {
    pub fn config1() -> Self {
        Self { min_num_matches: 15, filter_max_reproj_error: 4.0 }
    }

    pub fn config2() -> Self {
        Self { min_num_matches: 4, filter_max_reproj_error: 12.0 }
    }

    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Config1 => Self::config1(),
            Profile::Config2 => Self::config2(),
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        if self.min_num_matches == 0 || !(self.filter_max_reproj_error > 0.0) {
            return Err(MappingError::InvalidParams(
                "min_num_matches and filter_max_reproj_error must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self::config1()
    }
}

struct ImageGeom<'a> {
    camera: &'a Camera,
    pose: Pose,
    keypoints: &'a FeatureArray,
}

fn keypoints_type(ds: &Dataset) -> Result<&str, MappingError> {
    ds.features.default_keypoints_type().ok_or_else(|| {
        MappingError::MissingFeatures("expected exactly one keypoint type".into())
    })
}

fn image_geometry<'a>(
    ds: &'a Dataset,
    kpt_type: &str,
    images: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<&'a str, ImageGeom<'a>>, MappingError> {
    let index = ds.image_index();
    let kpts = &ds.features.keypoints[kpt_type];
    images
        .into_iter()
        .map(|image| {
            let missing = || MappingError::MissingPose(image.to_string());
            let (ts, sensor) = index.get(image).ok_or_else(missing)?;
            let pose = ds.sensor_pose(*ts, sensor).ok_or_else(missing)?;
            let camera = ds.camera(sensor).ok_or_else(missing)?;
            let keypoints = kpts
                .get(image)
                .ok_or_else(|| MappingError::MissingFeatures(format!("no keypoints for `{image}`")))?;
            Ok((image, ImageGeom { camera, pose, keypoints }))
        })
        .collect()
}

/// Stored matches of a pair when present, otherwise freshly computed ones.
fn pair_matches(ds: &Dataset, kpt_type: &str, a: &str, b: &str, mp: &MatchParams) -> Result<Vec<KeypointMatch>, MappingError> {
    if let Some(m) = ds.features.pair_matches(kpt_type, a, b) {
        return Ok(m);
    }
    let descs = ds
        .features
        .descriptors
        .get(kpt_type)
        .ok_or_else(|| MappingError::MissingFeatures(format!("no descriptors of type `{kpt_type}`")))?;
    let get = |img: &str| {
        descs.get(img).ok_or_else(|| MappingError::MissingFeatures(format!("no descriptors for `{img}`")))
    };
    Ok(match_descriptors(get(a)?, get(b)?, mp)?)
}

/// Triangulates a map from the known poses of `ds`.
///
/// Each listed pair is matched (stored matches take precedence), verified
/// against its epipolar geometry and kept only with at least
/// `min_num_matches` survivors. Surviving matches are chained into tracks,
/// each track is triangulated, and points reprojecting worse than
/// `filter_max_reproj_error` in any view are dropped. Point ids follow the
/// sorted track order.
pub fn triangulate_map(
    ds: &Dataset,
    pairs: &PairList,
    mp: &MatchParams,
    mc: &MapperConfig,
) -> Result<ReconstructedMap, MappingError> {
    mp.validate()?;
    mc.validate()?;
    if pairs.is_empty() {
        let kpt_type = ds.features.default_keypoints_type().unwrap_or_default();
        return Ok(ReconstructedMap::new(kpt_type));
    }
    let kpt_type = keypoints_type(ds)?;
    let pairs = pairs.clone().dedup_symmetric();
    let images: BTreeSet<&str> =
        pairs.iter().flat_map(|p| [p.image_a.as_str(), p.image_b.as_str()]).collect();
    let geom = image_geometry(ds, kpt_type, images)?;

    let verified: Vec<(&str, &str, Vec<KeypointMatch>)> = pairs
        .pairs
        .par_iter()
        .map(|p| {
            let (a, b) = (p.image_a.as_str(), p.image_b.as_str());
            let (ga, gb) = (&geom[a], &geom[b]);
            let m = pair_matches(ds, kpt_type, a, b, mp)?;
            let v = verify_matches_epipolar(
                &m, ga.camera, &ga.pose, gb.camera, &gb.pose, ga.keypoints, gb.keypoints, mp.epipolar_px,
            );
            Ok((a, b, v))
        })
        .collect::<Result<_, MappingError>>()?;
    let kept = verified.iter().filter(|(_, _, v)| v.len() >= mc.min_num_matches);
    let tracks = build_tracks(kept.map(|(a, b, v)| (*a, *b, v.as_slice())));
    log::debug!("{} tracks from {} pairs", tracks.len(), verified.len());

    let points: Vec<Option<Point3>> = tracks
        .par_iter()
        .map(|t| {
            let views: Vec<View> = t
                .members
                .iter()
                .map(|(img, k)| {
                    let g = &geom[img.as_str()];
                    View { camera: g.camera, pose: &g.pose, pixel: g.keypoints.keypoint(*k) }
                })
                .collect();
            triangulate(&views)
                .ok()
                .filter(|tri| tri.max_residual() <= mc.filter_max_reproj_error)
                .map(|tri| tri.point)
        })
        .collect();

    let mut map = ReconstructedMap::new(kpt_type);
    for (track, point) in tracks.into_iter().zip(points) {
        if let Some(xyz) = point {
            let id = map.points.len() as u64;
            map.points.insert(id, MapPoint { xyz, rgb: None });
            map.observations.insert(id, track.members);
        }
    }
    Ok(map)
}

/// Builds a map by lifting every keypoint with valid depth to 3D.
///
/// With `merge`, keypoints linked by stored matches that pass epipolar
/// verification become one point at the mean of their back-projections.
/// Conflicting groups (two keypoints of one image) are not merged.
pub fn rgbd_map(ds: &Dataset, mp: &MatchParams, merge: bool) -> Result<ReconstructedMap, MappingError> {
    mp.validate()?;
    let kpt_type = keypoints_type(ds)?;
    let images: Vec<String> = ds.images();
    let geom = image_geometry(ds, kpt_type, images.iter().map(|s| s.as_str()))?;

    // (image, keypoint) -> back-projected point
    let lifted: BTreeMap<(&str, usize), Point3> = images
        .par_iter()
        .map(|image| {
            let g = &geom[image.as_str()];
            let depth = ds.depth_of_image(image).ok_or_else(|| MappingError::MissingDepth(image.clone()))?;
            let pts: Vec<((&str, usize), Point3)> = (0..g.keypoints.rows())
                .filter_map(|k| {
                    let px = g.keypoints.keypoint(k);
                    let d = depth.lookup_nearest(&px)?;
                    let x = backproject(g.camera, &g.pose, &px, d).ok()?;
                    Some(((image.as_str(), k), x))
                })
                .collect();
            Ok(pts)
        })
        .collect::<Result<Vec<_>, MappingError>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut groups: Vec<Vec<(&str, usize)>> = Vec::new();
    let mut grouped = BTreeSet::new();
    if merge {
        if let Some(stored) = ds.features.matches.get(kpt_type) {
            let verified: Vec<(&str, &str, Vec<KeypointMatch>)> = stored
                .iter()
                .filter(|((a, b), _)| geom.contains_key(a.as_str()) && geom.contains_key(b.as_str()))
                .map(|((a, b), m)| {
                    let (ga, gb) = (&geom[a.as_str()], &geom[b.as_str()]);
                    let v = verify_matches_epipolar(
                        m, ga.camera, &ga.pose, gb.camera, &gb.pose, ga.keypoints, gb.keypoints, mp.epipolar_px,
                    )
                    .into_iter()
                    .filter(|x| lifted.contains_key(&(a.as_str(), x.idx_a)) && lifted.contains_key(&(b.as_str(), x.idx_b)))
                    .collect();
                    (a.as_str(), b.as_str(), v)
                })
                .collect();
            for t in build_tracks(verified.iter().map(|(a, b, v)| (*a, *b, v.as_slice()))) {
                let members: Vec<(&str, usize)> = t
                    .members
                    .iter()
                    .map(|(img, k)| (*geom.get_key_value(img.as_str()).expect("known image").0, *k))
                    .collect();
                grouped.extend(members.iter().copied());
                groups.push(members);
            }
        }
    }
    groups.extend(lifted.keys().filter(|k| !grouped.contains(*k)).map(|k| vec![*k]));
    groups.sort();

    let mut map = ReconstructedMap::new(kpt_type);
    for (id, members) in groups.into_iter().enumerate() {
        let sum: Point3 = members.iter().map(|m| lifted[m]).sum();
        let xyz = sum / members.len() as f64;
        map.points.insert(id as u64, MapPoint { xyz, rgb: None });
        map.observations.insert(id as u64, members.into_iter().map(|(i, k)| (i.to_string(), k)).collect());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{DepthImage, FeatureSet};
    use crate::geometry::project;
    use crate::matching::match_image_pairs;
    use crate::synth::{generate_scene, SynthConfig, KEYPOINTS_TYPE};

    fn exhaustive_pairs(ds: &Dataset) -> PairList {
        let images = ds.images();
        let mut l = PairList::new();
        for (i, a) in images.iter().enumerate() {
            for b in &images[i + 1..] {
                l.push(a.clone(), b.clone(), 0.0);
            }
        }
        l
    }

    fn cfg() -> SynthConfig {
        SynthConfig {
            seed: 17,
            n_points: 400,
            n_map_cams: 10,
            n_query_cams: 0,
            pixel_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_pairs_give_empty_map() {
        let s = generate_scene(&cfg()).unwrap();
        let map = triangulate_map(&s.mapping, &PairList::new(), &MatchParams::default(), &MapperConfig::default()).unwrap();
        assert!(map.is_empty());
    }

    #[test]
    fn noiseless_scene_recovers_visible_tracks() {
        let s = generate_scene(&cfg()).unwrap();
        let mp = MatchParams { ratio: Some(0.8), ..MatchParams::default() };
        let mc = MapperConfig { min_num_matches: 1, ..MapperConfig::default() };
        let map = triangulate_map(&s.mapping, &exhaustive_pairs(&s.mapping), &mp, &mc).unwrap();

        // Oracle: points seen by at least two mapping images.
        let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
        for image in s.mapping.images() {
            for (_, id) in &s.truth.correspondences[&image] {
                *seen.entry(*id).or_default() += 1;
            }
        }
        let expected = seen.values().filter(|c| **c >= 2).count();
        assert_eq!(map.points.len(), expected);

        let mut sq = 0.0;
        for (id, obs) in &map.observations {
            let truth_ids: BTreeSet<u64> =
                obs.iter().map(|(img, k)| s.truth.point_of_keypoint(img)[k]).collect();
            assert_eq!(truth_ids.len(), 1);
            let t = s.truth.points[truth_ids.iter().next().unwrap()];
            sq += (map.points[id].xyz - t).norm_squared();
        }
        let rms = (sq / map.points.len() as f64).sqrt();
        assert!(rms < 1e-6, "rms {rms}");
    }

    #[test]
    fn noisy_points_respect_reprojection_filter() {
        let s = generate_scene(&SynthConfig { pixel_noise_sigma: 0.5, outlier_fraction: 0.2, ..cfg() }).unwrap();
        let mc = MapperConfig::config1();
        let map = triangulate_map(&s.mapping, &exhaustive_pairs(&s.mapping), &MatchParams::config1(), &mc).unwrap();
        assert!(map.points.len() > 100);
        let mut with_map = s.mapping.clone();
        with_map.map = Some(map.clone());
        with_map.validate().unwrap();
        let kp = &s.mapping.features.keypoints[KEYPOINTS_TYPE];
        for (id, obs) in &map.observations {
            for (img, k) in obs {
                let cam = s.mapping.camera_of_image(img).unwrap();
                let pose = s.mapping.image_pose(img).unwrap();
                let p = project(cam, &pose, &map.points[id].xyz).unwrap();
                assert!((p - kp.get(img).unwrap().keypoint(*k)).norm() <= mc.filter_max_reproj_error + 1e-9);
            }
        }
    }

    #[test]
    fn missing_pose_is_reported() {
        let mut s = generate_scene(&cfg()).unwrap();
        s.mapping.trajectories = Default::default();
        let r = triangulate_map(&s.mapping, &exhaustive_pairs(&s.mapping), &MatchParams::default(), &MapperConfig::default());
        assert!(matches!(r, Err(MappingError::MissingPose(_))));
    }

    #[test]
    fn rgbd_single_image_reprojects_onto_keypoints() {
        let s = generate_scene(&SynthConfig { n_map_cams: 1, depth_render: true, ..cfg() }).unwrap();
        let map = rgbd_map(&s.mapping, &MatchParams::default(), false).unwrap();
        let image = &s.mapping.images()[0];
        let kp = s.mapping.features.keypoints[KEYPOINTS_TYPE].get(image).unwrap();
        assert_eq!(map.points.len(), kp.rows());
        let cam = s.mapping.camera_of_image(image).unwrap();
        let pose = s.mapping.image_pose(image).unwrap();
        for (id, obs) in &map.observations {
            let p = project(cam, &pose, &map.points[id].xyz).unwrap();
            assert!((p - kp.keypoint(obs[0].1)).norm() < 1e-9);
        }
    }

    #[test]
    fn rgbd_skips_keypoints_without_depth() {
        let mut s = generate_scene(&SynthConfig { n_map_cams: 1, depth_render: true, ..cfg() }).unwrap();
        let image = s.mapping.images()[0].clone();
        let n = s.mapping.features.keypoints[KEYPOINTS_TYPE].get(&image).unwrap().rows();
        let path = s.mapping.depth_records.values().next().unwrap().clone();
        let d = &s.mapping.depth_maps[&path];
        s.mapping.depth_maps.insert(path, DepthImage::zeros(d.width, d.height));
        let map = rgbd_map(&s.mapping, &MatchParams::default(), false).unwrap();
        assert!(n > 0 && map.points.is_empty());
    }

    #[test]
    fn rgbd_requires_depth() {
        let s = generate_scene(&cfg()).unwrap();
        assert!(matches!(rgbd_map(&s.mapping, &MatchParams::default(), false), Err(MappingError::MissingDepth(_))));
    }

    #[test]
    fn rgbd_merge_fuses_matched_keypoints() {
        let mut s = generate_scene(&SynthConfig { n_map_cams: 12, depth_render: true, ..cfg() }).unwrap();
        let pairs = exhaustive_pairs(&s.mapping);
        let mp = MatchParams { ratio: Some(0.8), ..MatchParams::default() };
        let matches = match_image_pairs(&s.mapping.features.descriptors[KEYPOINTS_TYPE], &pairs, &mp).unwrap();
        s.mapping.features.matches.insert(KEYPOINTS_TYPE.into(), matches);
        let separate = rgbd_map(&s.mapping, &mp, false).unwrap();
        let merged = rgbd_map(&s.mapping, &mp, true).unwrap();
        assert!(merged.points.len() < separate.points.len());
        let mut multi = 0;
        for (id, obs) in &merged.observations {
            let truth: BTreeSet<u64> = obs.iter().map(|(img, k)| s.truth.point_of_keypoint(img)[k]).collect();
            assert_eq!(truth.len(), 1);
            if obs.len() > 1 {
                multi += 1;
                let t = s.truth.points[truth.iter().next().unwrap()];
                assert!((merged.points[id].xyz - t).norm() < 1e-6);
            }
        }
        assert!(multi > 50);
        let mut ds = s.mapping.clone();
        ds.map = Some(merged);
        ds.validate().unwrap();
    }

    #[test]
    fn missing_keypoint_type_is_reported() {
        let mut s = generate_scene(&cfg()).unwrap();
        s.mapping.features.keypoints.insert("other".into(), FeatureSet::new(2));
        let r = rgbd_map(&s.mapping, &MatchParams::default(), false);
        assert!(matches!(r, Err(MappingError::MissingFeatures(_))));
    }
}

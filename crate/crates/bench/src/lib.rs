//! Shared fixtures for the benchmarks.

use locmap::localization::Correspondence2D3D;
use locmap::synth::{generate_scene, SynthConfig};
use locmap::SynthScene;

/// The end-to-end test scene: 2000 points, 40 mapping and 10 query images.
pub fn scene() -> SynthScene {
    generate_scene(&SynthConfig { seed: 7, ..Default::default() }).expect("default scene is valid")
}

/// Ground-truth 2D-3D correspondences of one query image, outliers included
/// as keypoints paired with an arbitrary map point.
pub fn query_correspondences(scene: &SynthScene, image: &str) -> Vec<Correspondence2D3D> {
    let kpts = &scene.query.features.keypoints[locmap::synth::KEYPOINTS_TYPE].arrays[image];
    let truth = scene.truth.point_of_keypoint(image);
    let ids: Vec<u64> = scene.truth.points.keys().copied().collect();
    (0..kpts.rows())
        .map(|i| {
            let point_id = truth.get(&i).copied().unwrap_or(ids[(i * 7919) % ids.len()]);
            Correspondence2D3D { keypoint_idx: i, pixel: kpts.keypoint(i), point_id, xyz: scene.truth.points[&point_id] }
        })
        .collect()
}

//! Deterministic synthetic scenes with known geometry.
//!
//! Points are drawn uniformly in a box centred on the origin; mapping and
//! query cameras sit on a horizontal ring around it and look at its centre.
//! Every random quantity comes from its own ChaCha stream keyed by the seed
//! and the entity it belongs to, so growing one part of a configuration
//! leaves the others untouched.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datastore::csv::{format_real, Table, TableWriter};
use crate::datastore::{
    pose_fields, parse_pose, save_dataset, Dataset, DatastoreError, DepthImage, FeatureArray,
    FeatureSet, Rig, RigMember,
};
use crate::geometry::{Camera, Point2, Point3, Pose};

pub const KEYPOINTS_TYPE: &str = "synth";
pub const GLOBAL_TYPE: &str = "synth_global";
pub const MAP_SENSOR_PREFIX: &str = "map_cam";
pub const QUERY_SENSOR_PREFIX: &str = "query_cam";
pub const MAP_RIG: &str = "map_rig";
pub const QUERY_RIG: &str = "query_rig";

/// Side of the square patch each point claims in a rendered depth map.
const SPLAT: i64 = 5;
const NEAR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_cams: usize,
    /// Offset of cameras 1..n along the rig's x axis, meters.
    pub baselines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_points: usize,
    /// Capture positions on the ring; each holds one image per rig camera.
    pub n_map_cams: usize,
    pub n_query_cams: usize,
    /// Side of the point box, meters. The box is a quarter as tall.
    pub scene_extent_m: f64,
    pub pixel_noise_sigma: f64,
    pub descriptor_dim_local: usize,
    pub descriptor_dim_global: usize,
    /// Outlier keypoints per true keypoint.
    pub outlier_fraction: f64,
    pub rig_spec: Option<RigSpec>,
    pub depth_render: bool,
    /// `(sigma_t_m, sigma_r_deg)` applied to the stored mapping poses.
    pub pose_noise: Option<(f64, f64)>,
    /// Per-component Gaussian noise added to a point's descriptor per view.
    pub descriptor_noise: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
    /// Ring radius as a multiple of `scene_extent_m`.
    pub ring_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 2000,
            n_map_cams: 40,
            n_query_cams: 10,
            scene_extent_m: 4.0,
            pixel_noise_sigma: 0.5,
            descriptor_dim_local: 32,
            descriptor_dim_global: 64,
            outlier_fraction: 0.2,
            rig_spec: None,
            depth_render: false,
            pose_noise: None,
            descriptor_noise: 0.03,
            image_width: 640,
            image_height: 480,
            focal_px: 600.0,
            ring_radius: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid synthetic scene configuration: {0}")]
pub struct SynthConfigError(pub String);

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthConfigError> {
        let bad = |m: &str| Err(SynthConfigError(m.to_string()));
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(self.scene_extent_m > 0.0 && self.focal_px > 0.0 && self.ring_radius > 0.75) {
            return bad("scene_extent_m and focal_px must be positive and the ring must enclose the box");
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.descriptor_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.descriptor_dim_local == 0 || self.descriptor_dim_global == 0 {
            return bad("descriptor dimensions must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if let Some(r) = &self.rig_spec {
            if r.n_cams == 0 || r.baselines.len() + 1 != r.n_cams {
                return bad("rig_spec needs n_cams >= 1 and n_cams - 1 baselines");
            }
        }
        if let Some((t, r)) = self.pose_noise {
            if !(t >= 0.0 && r >= 0.0) {
                return bad("pose noise must be non-negative");
            }
        }
        Ok(())
    }

    fn camera(&self, sensor_id: String) -> Camera {
        Camera::pinhole(
            sensor_id,
            self.image_width,
            self.image_height,
            self.focal_px,
            self.focal_px,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
        )
    }

    fn rig_cams(&self) -> usize {
        self.rig_spec.as_ref().map_or(1, |r| r.n_cams)
    }
}

/// Ground truth of a synthetic scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// True world-to-camera pose of every mapping and query image.
    pub poses: BTreeMap<String, Pose>,
    pub points: BTreeMap<u64, Point3>,
    /// Per image: `(keypoint_idx, point_id)` of every non-outlier keypoint.
    pub correspondences: BTreeMap<String, Vec<(usize, u64)>>,
}

impl GroundTruth {
    /// `keypoint_idx -> point_id` for one image.
    pub fn point_of_keypoint(&self, image: &str) -> BTreeMap<usize, u64> {
        self.correspondences.get(image).map_or_else(BTreeMap::new, |v| v.iter().copied().collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatastoreError> {
        let mut w = TableWriter::new("poses");
        for (image, pose) in &self.poses {
            let mut row = vec![image.clone()];
            row.extend(pose_fields(pose));
            w.row(row);
        }
        w.write_to(&dir.join("poses.txt"))?;
        let mut w = TableWriter::new("points3d");
        for (id, p) in &self.points {
            w.row([id.to_string(), format_real(p.x), format_real(p.y), format_real(p.z)]);
        }
        w.write_to(&dir.join("points3d.txt"))?;
        let mut w = TableWriter::new("correspondences");
        for (image, list) in &self.correspondences {
            for (kp, id) in list {
                w.row([image.clone(), kp.to_string(), id.to_string()]);
            }
        }
        w.write_to(&dir.join("correspondences.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self, DatastoreError> {
        let read = |name: &str| {
            let p = dir.join(name);
            Table::read(&p)?.ok_or(DatastoreError::MissingFile(p))
        };
        let mut gt = GroundTruth::default();
        for row in read("poses.txt")?.rows() {
            row.expect_len(&[8])?;
            gt.poses.insert(row.str(0)?.to_string(), parse_pose(&row, 1)?);
        }
        for row in read("points3d.txt")?.rows() {
            row.expect_len(&[4])?;
            gt.points.insert(row.parse(0)?, Point3::new(row.real(1)?, row.real(2)?, row.real(3)?));
        }
        for row in read("correspondences.txt")?.rows() {
            row.expect_len(&[3])?;
            gt.correspondences
                .entry(row.str(0)?.to_string())
                .or_default()
                .push((row.parse(1)?, row.parse(2)?));
        }
        Ok(gt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub mapping: Dataset,
    pub query: Dataset,
    pub truth: GroundTruth,
}

impl SynthScene {
    /// Writes `mapping/`, `query/` and `ground_truth/` under `root`.
    pub fn save(&self, root: &Path) -> Result<(), DatastoreError> {
        save_dataset(&self.mapping, &root.join("mapping"))?;
        save_dataset(&self.query, &root.join("query"))?;
        self.truth.save(&root.join("ground_truth"))
    }
}

/// Entity kinds for stream keys.
#[derive(Clone, Copy)]
enum Stream {
    PointPosition = 1,
    PointDescriptor = 2,
    MapView = 3,
    QueryView = 4,
    MapPoseNoise = 5,
}

fn rng_for(seed: u64, kind: Stream, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((kind as u64) << 56) | index);
    r
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// World-to-camera pose of a camera at `center` looking at `target`, with
/// image rows pointing down along world −z.
pub fn look_at(center: Point3, target: Point3) -> Pose {
    let z = (target - center).normalize();
    let up = Vector3::z();
    let down = -(up - z * up.dot(&z));
    let y = if down.norm() > 1e-9 { down.normalize() } else { Vector3::y() };
    let x = y.cross(&z);
    let r = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]));
    Pose::from_center(UnitQuaternion::from_rotation_matrix(&r), center)
}

/// Depth map of `points` seen from one camera, plus the ids of the points
/// left visible. Points are splatted front to back as small square patches;
/// a point whose own pixel is already covered is occluded.
pub fn render_depth(cam: &Camera, pose: &Pose, points: &BTreeMap<u64, Point3>) -> (DepthImage, Vec<(u64, Point2)>) {
    let mut proj: Vec<(f64, u64, Point2)> = points
        .iter()
        .filter_map(|(id, x)| {
            let xc = pose.transform_point(x);
            if xc.z <= NEAR {
                return None;
            }
            let p = cam.project_camera_frame(&xc)?;
            cam.contains(&p).then_some((xc.z, *id, p))
        })
        .collect();
    proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut depth = DepthImage::zeros(cam.width, cam.height);
    let mut visible = Vec::new();
    let (w, h) = (cam.width as i64, cam.height as i64);
    for (z, id, p) in proj {
        let (u, v) = (p.x.round() as i64, p.y.round() as i64);
        if u >= w || v >= h || depth.get(u as u32, v as u32) > 0.0 {
            continue;
        }
        for dv in -(SPLAT / 2)..=SPLAT / 2 {
            for du in -(SPLAT / 2)..=SPLAT / 2 {
                let (x, y) = (u + du, v + dv);
                if x >= 0 && y >= 0 && x < w && y < h && depth.get(x as u32, y as u32) == 0.0 {
                    depth.set(x as u32, y as u32, z as f32);
                }
            }
        }
        visible.push((id, p));
    }
    visible.sort_by_key(|(id, _)| *id);
    (depth, visible)
}

/// Depth map of the plane `n·x = d` (world frame) seen from one camera;
/// pixels whose ray misses the plane in front of the camera stay 0.
pub fn render_plane_depth(cam: &Camera, pose: &Pose, normal: &Vector3<f64>, d: f64) -> DepthImage {
    let mut depth = DepthImage::zeros(cam.width, cam.height);
    let r = pose.rotation_matrix();
    let c = pose.center();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let ray_cam = cam.unproject(&Point2::new(u as f64, v as f64));
            let ray = r.transpose() * ray_cam;
            let denom = normal.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let z = (d - normal.dot(&c)) / denom;
            if z > NEAR {
                depth.set(u, v, z as f32);
            }
        }
    }
    depth
}

struct ViewSpec {
    path: String,
    timestamp: u64,
    sensor: String,
    pose: Pose,
    stream: (Stream, u64),
}

fn ring_pose(angle: f64, radius: f64, height: f64) -> Pose {
    let center = Point3::new(radius * angle.cos(), radius * angle.sin(), height);
    look_at(center, Point3::new(0.0, 0.0, 0.0))
}

fn rig_members(cfg: &SynthConfig, prefix: &str) -> Vec<RigMember> {
    let mut offsets = vec![0.0];
    if let Some(r) = &cfg.rig_spec {
        offsets.extend(&r.baselines);
    }
    offsets
        .iter()
        .enumerate()
        .map(|(k, b)| RigMember {
            sensor_id: format!("{prefix}{k}"),
            pose: Pose::from_center(UnitQuaternion::identity(), Point3::new(*b, 0.0, 0.0)),
        })
        .collect()
}

fn perturb(pose: &Pose, sigma_t: f64, sigma_r_deg: f64, rng: &mut ChaCha8Rng) -> Pose {
    let nt = Normal::new(0.0, sigma_t).expect("finite sigma");
    let nr = Normal::new(0.0, sigma_r_deg.to_radians()).expect("finite sigma");
    let dc = Vector3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    let dr = UnitQuaternion::from_scaled_axis(Vector3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng)));
    Pose::from_center(dr * pose.rotation(), pose.center() + dc)
}

fn global_bin(cfg: &SynthConfig, x: &Point3) -> usize {
    let d = cfg.descriptor_dim_global;
    let g = ((d as f64).cbrt().ceil() as usize).max(1);
    let e = cfg.scene_extent_m;
    let cell = |v: f64, side: f64| (((v / side + 0.5) * g as f64).floor() as i64).clamp(0, g as i64 - 1) as usize;
    let idx = cell(x.x, e) + g * (cell(x.y, e) + g * cell(x.z, e / 4.0));
    idx % d
}

/// Generates mapping and query datasets plus their ground truth.
pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthScene, SynthConfigError> {
    cfg.validate()?;
    let e = cfg.scene_extent_m;
    let radius = cfg.ring_radius * e;

    let points: BTreeMap<u64, Point3> = (0..cfg.n_points as u64)
        .map(|id| {
            let mut r = rng_for(cfg.seed, Stream::PointPosition, id);
            let p = Point3::new(
                r.random_range(-0.5..0.5) * e,
                r.random_range(-0.5..0.5) * e,
                r.random_range(-0.5..0.5) * e / 4.0,
            );
            (id, p)
        })
        .collect();
    let base_desc: BTreeMap<u64, Vec<f64>> = points
        .keys()
        .map(|id| {
            let mut r = rng_for(cfg.seed, Stream::PointDescriptor, *id);
            (*id, unit_gaussian(&mut r, cfg.descriptor_dim_local))
        })
        .collect();

    let mut truth = GroundTruth { points: points.clone(), ..Default::default() };
    let map_members = rig_members(cfg, MAP_SENSOR_PREFIX);
    let query_members = rig_members(cfg, QUERY_SENSOR_PREFIX);
    let rigged = cfg.rig_spec.is_some();

    let mut mapping = Dataset::default();
    let mut query = Dataset::default();
    for m in &map_members {
        mapping.cameras.push(cfg.camera(m.sensor_id.clone()));
    }
    for m in &query_members {
        query.cameras.push(cfg.camera(m.sensor_id.clone()));
    }
    if rigged {
        mapping.rigs.push(Rig { rig_id: MAP_RIG.into(), members: map_members.clone() });
        query.rigs.push(Rig { rig_id: QUERY_RIG.into(), members: query_members.clone() });
    }

    let mut map_views = Vec::new();
    for j in 0..cfg.n_map_cams {
        let angle = TAU * j as f64 / cfg.n_map_cams as f64;
        let height = 0.1 * e * (3.0 * angle).sin();
        let frame = ring_pose(angle, radius, height);
        let stored = match cfg.pose_noise {
            Some((st, sr)) => perturb(&frame, st, sr, &mut rng_for(cfg.seed, Stream::MapPoseNoise, j as u64)),
            None => frame,
        };
        if rigged {
            mapping.trajectories.insert(j as u64, MAP_RIG, stored).expect("unique timestamps");
        }
        for (k, m) in map_members.iter().enumerate() {
            if !rigged {
                mapping.trajectories.insert(j as u64, m.sensor_id.clone(), stored).expect("unique timestamps");
            }
            map_views.push(ViewSpec {
                path: format!("{}/{j:06}.jpg", m.sensor_id),
                timestamp: j as u64,
                sensor: m.sensor_id.clone(),
                pose: m.pose.compose(&frame),
                stream: (Stream::MapView, (j * cfg.rig_cams() + k) as u64),
            });
        }
    }
    let mut query_views = Vec::new();
    for i in 0..cfg.n_query_cams {
        let angle = TAU * (i as f64 + 0.37) / cfg.n_query_cams.max(1) as f64;
        let height = 0.05 * e;
        let frame = ring_pose(angle, 0.9 * radius, height);
        for (k, m) in query_members.iter().enumerate() {
            query_views.push(ViewSpec {
                path: format!("{}/{i:06}.jpg", m.sensor_id),
                timestamp: i as u64,
                sensor: m.sensor_id.clone(),
                pose: m.pose.compose(&frame),
                stream: (Stream::QueryView, (i * cfg.rig_cams() + k) as u64),
            });
        }
    }

    for (views, ds, with_depth) in [(&map_views, &mut mapping, cfg.depth_render), (&query_views, &mut query, false)] {
        let mut kpts = FeatureSet::new(2);
        let mut descs = FeatureSet::new(cfg.descriptor_dim_local);
        let mut globals = FeatureSet::new(cfg.descriptor_dim_global);
        let mut any_keypoints = false;
        for v in views {
            let cam = ds.camera(&v.sensor).expect("camera exists").clone();
            ds.image_records.insert((v.timestamp, v.sensor.clone()), v.path.clone());
            truth.poses.insert(v.path.clone(), v.pose);
            let (depth, visible) = render_depth(&cam, &v.pose, &points);
            if with_depth {
                let depth_path = v.path.replace(".jpg", ".depth");
                ds.depth_records.insert((v.timestamp, v.sensor.clone()), depth_path.clone());
                ds.depth_maps.insert(depth_path, depth);
            }
            let mut rng = rng_for(cfg.seed, v.stream.0, v.stream.1);
            let pix_noise = Normal::new(0.0, cfg.pixel_noise_sigma).expect("finite sigma");
            let desc_noise = Normal::new(0.0, cfg.descriptor_noise).expect("finite sigma");
            // (point id or None for outliers, pixel, descriptor)
            let mut rows: Vec<(Option<u64>, [f32; 2], Vec<f64>)> = Vec::new();
            let mut hist = vec![0.0; cfg.descriptor_dim_global];
            for (id, p) in &visible {
                let noisy = Point2::new(
                    (p.x + pix_noise.sample(&mut rng)).clamp(0.0, cam.width as f64 - 1e-3),
                    (p.y + pix_noise.sample(&mut rng)).clamp(0.0, cam.height as f64 - 1e-3),
                );
                let d = normalize(base_desc[id].iter().map(|x| x + desc_noise.sample(&mut rng)).collect());
                rows.push((Some(*id), [noisy.x as f32, noisy.y as f32], d));
                hist[global_bin(cfg, &points[id])] += 1.0;
            }
            let n_out = (cfg.outlier_fraction * visible.len() as f64).round() as usize;
            for _ in 0..n_out {
                let px = [
                    rng.random_range(0.0..cam.width as f64) as f32,
                    rng.random_range(0.0..cam.height as f64) as f32,
                ];
                rows.push((None, px, unit_gaussian(&mut rng, cfg.descriptor_dim_local)));
            }
            rows.shuffle(&mut rng);
            any_keypoints |= !rows.is_empty();

            let mut corr = Vec::new();
            let mut kp_rows = Vec::with_capacity(rows.len());
            let mut desc_rows = Vec::with_capacity(rows.len());
            for (idx, (id, px, d)) in rows.into_iter().enumerate() {
                if let Some(id) = id {
                    corr.push((idx, id));
                }
                kp_rows.push(px.to_vec());
                desc_rows.push(d.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
            }
            truth.correspondences.insert(v.path.clone(), corr);
            let hist: Vec<f32> = normalize(hist).into_iter().map(|x| x as f32).collect();
            kpts.arrays.insert(v.path.clone(), FeatureArray::from_rows(2, &kp_rows).expect("shape"));
            descs.arrays.insert(
                v.path.clone(),
                FeatureArray::from_rows(cfg.descriptor_dim_local, &desc_rows).expect("shape"),
            );
            globals
                .arrays
                .insert(v.path.clone(), FeatureArray::new(1, cfg.descriptor_dim_global, hist).expect("shape"));
        }
        if any_keypoints {
            ds.features.keypoints.insert(KEYPOINTS_TYPE.into(), kpts);
            ds.features.descriptors.insert(KEYPOINTS_TYPE.into(), descs);
            ds.features.global_features.insert(GLOBAL_TYPE.into(), globals);
        }
    }
    Ok(SynthScene { mapping, query, truth })
}

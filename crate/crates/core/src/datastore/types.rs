use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::{Camera, Point2, Point3, Pose};

use super::DatastoreError;

/// `(timestamp, device or sensor id)`
pub type RecordKey = (u64, String);

#[derive(Debug, Clone, PartialEq)]
pub struct RigMember {
    pub sensor_id: String,
    /// Transform from rig coordinates to sensor coordinates.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub rig_id: String,
    pub members: Vec<RigMember>,
}

impl Rig {
    pub fn member(&self, sensor_id: &str) -> Option<&RigMember> {
        self.members.iter().find(|m| m.sensor_id == sensor_id)
    }
}

/// Poses keyed by `(timestamp, device_id)`; the device is a sensor or a rig.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectories {
    entries: BTreeMap<RecordKey, Pose>,
}

impl Trajectories {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a pose; fails if the key is already present.
    pub fn insert(
        &mut self,
        timestamp: u64,
        device_id: impl Into<String>,
        pose: Pose,
    ) -> Result<(), DatastoreError> {
        let key = (timestamp, device_id.into());
        if self.entries.contains_key(&key) {
            return Err(DatastoreError::InvariantViolation(format!(
                "duplicate trajectory entry ({}, {})",
                key.0, key.1
            )));
        }
        self.entries.insert(key, pose);
        Ok(())
    }

    pub fn get(&self, timestamp: u64, device_id: &str) -> Option<&Pose> {
        self.entries.get(&(timestamp, device_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RecordKey, &Pose)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dense row-major float32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArray {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureArray {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DatastoreError> {
        if rows * cols != data.len() {
            return Err(DatastoreError::InvariantViolation(format!(
                "array of {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self, DatastoreError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DatastoreError::InvariantViolation(format!(
                    "row of length {} in array with {cols} columns",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn empty(cols: usize) -> Self {
        Self { rows: 0, cols, data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; zero-column arrays have no rows to yield.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Pixel location of keypoint `i` (the first two columns).
    pub fn keypoint(&self, i: usize) -> Point2 {
        let r = self.row(i);
        Point2::new(r[0] as f64, r[1] as f64)
    }
}

/// One feature type: the per-image arrays plus their shared row width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dsize: usize,
    pub arrays: BTreeMap<String, FeatureArray>,
}

impl FeatureSet {
    pub fn new(dsize: usize) -> Self {
        Self { dsize, arrays: BTreeMap::new() }
    }

    pub fn get(&self, image: &str) -> Option<&FeatureArray> {
        self.arrays.get(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointMatch {
    pub idx_a: usize,
    pub idx_b: usize,
    pub score: f32,
}

/// Matches of one image pair; the key is ordered so that `a < b`.
pub type PairMatches = BTreeMap<(String, String), Vec<KeypointMatch>>;

/// Orders an image pair as stored on disk, reporting whether it was swapped.
pub fn ordered_pair(a: &str, b: &str) -> ((String, String), bool) {
    if a <= b {
        ((a.to_string(), b.to_string()), false)
    } else {
        ((b.to_string(), a.to_string()), true)
    }
}

/// Local features, global features and matches, keyed by type name.
///
/// Descriptors share the name of the keypoint type they describe, and so do
/// matches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    pub keypoints: BTreeMap<String, FeatureSet>,
    pub descriptors: BTreeMap<String, FeatureSet>,
    pub global_features: BTreeMap<String, FeatureSet>,
    pub matches: BTreeMap<String, PairMatches>,
}

impl FeatureStore {
    /// The single keypoint type, when exactly one exists.
    pub fn default_keypoints_type(&self) -> Option<&str> {
        let mut it = self.keypoints.keys();
        match (it.next(), it.next()) {
            (Some(k), None) => Some(k.as_str()),
            _ => None,
        }
    }

    /// Stored matches for `(a, b)` oriented as requested.
    pub fn pair_matches(&self, kpt_type: &str, a: &str, b: &str) -> Option<Vec<KeypointMatch>> {
        let (key, swapped) = ordered_pair(a, b);
        let stored = self.matches.get(kpt_type)?.get(&key)?;
        Some(if swapped {
            stored
                .iter()
                .map(|m| KeypointMatch { idx_a: m.idx_b, idx_b: m.idx_a, score: m.score })
                .collect()
        } else {
            stored.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub xyz: Point3,
    pub rgb: Option<[u8; 3]>,
}

/// `(image_path, keypoint_idx)`
pub type Observation = (String, usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructedMap {
    pub keypoints_type: String,
    pub points: BTreeMap<u64, MapPoint>,
    pub observations: BTreeMap<u64, Vec<Observation>>,
}

impl ReconstructedMap {
    pub fn new(keypoints_type: impl Into<String>) -> Self {
        Self { keypoints_type: keypoints_type.into(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reverse index `(image, keypoint) -> point_id`.
    pub fn keypoint_index(&self) -> BTreeMap<(&str, usize), u64> {
        let mut index = BTreeMap::new();
        for (pid, obs) in &self.observations {
            for (image, kp) in obs {
                index.insert((image.as_str(), *kp), *pid);
            }
        }
        index
    }

    /// Checks the referential and uniqueness invariants.
    pub fn validate(&self) -> Result<(), DatastoreError> {
        let mut seen = BTreeSet::new();
        for (pid, obs) in &self.observations {
            if !self.points.contains_key(pid) {
                return Err(DatastoreError::DanglingObservation(*pid));
            }
            for (image, kp) in obs {
                if !seen.insert((image.as_str(), *kp)) {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "keypoint {kp} of {image} observes more than one point"
                    )));
                }
            }
        }
        for (pid, p) in &self.points {
            if !p.xyz.iter().all(|v| v.is_finite()) {
                return Err(DatastoreError::InvariantViolation(format!(
                    "point {pid} has non-finite coordinates"
                )));
            }
        }
        Ok(())
    }
}

/// Row-major depth in meters; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: f32) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Depth at the pixel nearest to `px`, or `None` outside the image or on
    /// an invalid pixel.
    pub fn lookup_nearest(&self, px: &Point2) -> Option<f64> {
        let (x, y) = (px.x.round(), px.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let d = self.get(x as u32, y as u32);
        (d > 0.0).then_some(d as f64)
    }

    pub fn num_valid(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// A posed image: what pairing and mapping need to reason about geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub path: String,
    pub camera: Camera,
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub rigs: Vec<Rig>,
    pub trajectories: Trajectories,
    pub image_records: BTreeMap<RecordKey, String>,
    pub depth_records: BTreeMap<RecordKey, String>,
    /// Depth payloads keyed by the paths used in `depth_records`.
    pub depth_maps: BTreeMap<String, DepthImage>,
    pub features: FeatureStore,
    pub map: Option<ReconstructedMap>,
}

impl Dataset {
    pub fn camera(&self, sensor_id: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.sensor_id == sensor_id)
    }

    pub fn rig(&self, rig_id: &str) -> Option<&Rig> {
        self.rigs.iter().find(|r| r.rig_id == rig_id)
    }

    /// Rig containing `sensor_id`, if any.
    pub fn rig_of_sensor(&self, sensor_id: &str) -> Option<&Rig> {
        self.rigs.iter().find(|r| r.member(sensor_id).is_some())
    }

    /// Image paths in record order.
    pub fn images(&self) -> Vec<String> {
        let mut v: Vec<String> = self.image_records.values().cloned().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn record_of_image(&self, image: &str) -> Option<&RecordKey> {
        self.image_records
            .iter()
            .find_map(|(k, v)| (v == image).then_some(k))
    }

    /// `image_path -> (timestamp, sensor_id)`
    pub fn image_index(&self) -> BTreeMap<&str, &RecordKey> {
        self.image_records.iter().map(|(k, v)| (v.as_str(), k)).collect()
    }

    pub fn camera_of_image(&self, image: &str) -> Option<&Camera> {
        let (_, sensor) = self.record_of_image(image)?;
        self.camera(sensor)
    }

    /// World-to-sensor pose of a record, from the sensor's own trajectory
    /// entry or by chaining through its rig.
    pub fn sensor_pose(&self, timestamp: u64, sensor_id: &str) -> Option<Pose> {
        if let Some(p) = self.trajectories.get(timestamp, sensor_id) {
            return Some(*p);
        }
        let rig = self.rig_of_sensor(sensor_id)?;
        let rig_pose = self.trajectories.get(timestamp, &rig.rig_id)?;
        let member = rig.member(sensor_id)?;
        Some(member.pose.compose(rig_pose))
    }

    pub fn image_pose(&self, image: &str) -> Option<Pose> {
        let (ts, sensor) = self.record_of_image(image)?;
        self.sensor_pose(*ts, sensor)
    }

    /// All images with camera and (when resolvable) pose, sorted by path.
    pub fn posed_images(&self) -> Vec<PosedImage> {
        let mut out: Vec<PosedImage> = self
            .image_records
            .iter()
            .filter_map(|((ts, sensor), path)| {
                let camera = self.camera(sensor)?.clone();
                Some(PosedImage {
                    path: path.clone(),
                    camera,
                    pose: self.sensor_pose(*ts, sensor),
                })
            })
            .collect();
        out.sort_by(|a, b| a.path.cmp(&b.path));
        out
    }

    pub fn depth_of_image(&self, image: &str) -> Option<&DepthImage> {
        let key = self.record_of_image(image)?;
        let path = self.depth_records.get(key)?;
        self.depth_maps.get(path)
    }

    /// Checks every dataset invariant; a successful load implies these hold.
    pub fn validate(&self) -> Result<(), DatastoreError> {
        let mut sensor_ids = BTreeSet::new();
        for cam in &self.cameras {
            cam.validate()
                .map_err(|e| DatastoreError::InvariantViolation(e.to_string()))?;
            if !sensor_ids.insert(cam.sensor_id.as_str()) {
                return Err(DatastoreError::InvariantViolation(format!(
                    "duplicate sensor id `{}`",
                    cam.sensor_id
                )));
            }
        }
        let mut rig_ids = BTreeSet::new();
        for rig in &self.rigs {
            if sensor_ids.contains(rig.rig_id.as_str()) || !rig_ids.insert(rig.rig_id.as_str()) {
                return Err(DatastoreError::InvariantViolation(format!(
                    "duplicate rig id `{}`",
                    rig.rig_id
                )));
            }
            let mut members = BTreeSet::new();
            for m in &rig.members {
                if !sensor_ids.contains(m.sensor_id.as_str()) {
                    return Err(DatastoreError::UnknownSensorRef(m.sensor_id.clone()));
                }
                if !members.insert(m.sensor_id.as_str()) {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "sensor `{}` listed twice in rig `{}`",
                        m.sensor_id, rig.rig_id
                    )));
                }
            }
        }
        for ((_, device), _) in self.trajectories.iter() {
            if !sensor_ids.contains(device.as_str()) && !rig_ids.contains(device.as_str()) {
                return Err(DatastoreError::UnknownSensorRef(device.clone()));
            }
        }
        for (_, sensor) in self.image_records.keys().chain(self.depth_records.keys()) {
            if !sensor_ids.contains(sensor.as_str()) {
                return Err(DatastoreError::UnknownSensorRef(sensor.clone()));
            }
        }
        for path in self.depth_records.values() {
            if !self.depth_maps.contains_key(path) {
                return Err(DatastoreError::InvariantViolation(format!(
                    "depth record `{path}` has no payload"
                )));
            }
        }
        self.validate_features()?;
        if let Some(map) = &self.map {
            map.validate()?;
            let kpts = self.features.keypoints.get(&map.keypoints_type);
            for obs in map.observations.values() {
                for (image, kp) in obs {
                    let rows = kpts.and_then(|k| k.get(image)).map(|a| a.rows());
                    if rows.is_none_or(|n| *kp >= n) {
                        return Err(DatastoreError::InvariantViolation(format!(
                            "observation references missing keypoint {kp} of {image}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_features(&self) -> Result<(), DatastoreError> {
        let fs = &self.features;
        let check_set = |kind: &str, name: &str, set: &FeatureSet| {
            for (image, arr) in &set.arrays {
                if arr.cols() != set.dsize {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "{kind} `{name}` of {image} has {} columns, expected {}",
                        arr.cols(),
                        set.dsize
                    )));
                }
            }
            Ok(())
        };
        for (name, set) in &fs.keypoints {
            if set.dsize < 2 {
                return Err(DatastoreError::InvariantViolation(format!(
                    "keypoints `{name}` need at least 2 columns"
                )));
            }
            check_set("keypoints", name, set)?;
        }
        for (name, set) in &fs.descriptors {
            check_set("descriptors", name, set)?;
            let kpts = fs.keypoints.get(name).ok_or_else(|| {
                DatastoreError::InvariantViolation(format!("descriptors `{name}` without keypoints"))
            })?;
            for (image, arr) in &set.arrays {
                let n = kpts.get(image).map(|k| k.rows());
                if n != Some(arr.rows()) {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "descriptor rows of {image} do not match its keypoints"
                    )));
                }
            }
        }
        for (name, set) in &fs.global_features {
            check_set("global features", name, set)?;
            for (image, arr) in &set.arrays {
                if arr.rows() != 1 {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "global feature of {image} must have exactly one row"
                    )));
                }
            }
        }
        for (name, pairs) in &fs.matches {
            let kpts = fs.keypoints.get(name).ok_or_else(|| {
                DatastoreError::InvariantViolation(format!("matches `{name}` without keypoints"))
            })?;
            for ((a, b), list) in pairs {
                if a >= b {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "match pair ({a}, {b}) not in lexicographic order"
                    )));
                }
                let na = kpts.get(a).map_or(0, |k| k.rows());
                let nb = kpts.get(b).map_or(0, |k| k.rows());
                if list.iter().any(|m| m.idx_a >= na || m.idx_b >= nb) {
                    return Err(DatastoreError::InvariantViolation(format!(
                        "match index out of bounds in pair ({a}, {b})"
                    )));
                }
            }
        }
        Ok(())
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::geometry::{Camera, CameraModel, Pose};

use super::binary::{
    decode_f32, encode_f32, join_rel, list_files, load_depth_map, load_feature_sets, read_bytes,
    save_depth_map, save_feature_set,
};
use super::csv::{format_real, write_file, Row, Table, TableWriter};
use super::{
    Dataset, DatastoreError, KeypointMatch, MapPoint, PairMatches, ReconstructedMap, Rig,
    RigMember, Trajectories,
};

pub const SENSORS_FILE: &str = "sensors/sensors.txt";
pub const RIGS_FILE: &str = "sensors/rigs.txt";
pub const TRAJECTORIES_FILE: &str = "sensors/trajectories.txt";
pub const RECORDS_CAMERA_FILE: &str = "sensors/records_camera.txt";
pub const RECORDS_DEPTH_FILE: &str = "sensors/records_depth.txt";
pub const RECORDS_DATA_DIR: &str = "sensors/records_data";
pub const KEYPOINTS_DIR: &str = "reconstruction/keypoints";
pub const DESCRIPTORS_DIR: &str = "reconstruction/descriptors";
pub const GLOBAL_FEATURES_DIR: &str = "reconstruction/global_features";
pub const MATCHES_DIR: &str = "reconstruction/matches";
pub const POINTS3D_FILE: &str = "reconstruction/points3d.txt";
pub const OBSERVATIONS_FILE: &str = "reconstruction/observations.txt";

const KEYPOINTS_EXT: &str = ".kpt";
const DESCRIPTORS_EXT: &str = ".desc";
const GLOBAL_EXT: &str = ".gfeat";
const MATCHES_EXT: &str = ".matches";
const OVERLAPPING: &str = ".overlapping/";

/// Pose columns `qw, qx, qy, qz, tx, ty, tz`.
pub fn pose_fields(p: &Pose) -> Vec<String> {
    let q = p.wxyz();
    let t = p.translation();
    q.iter()
        .chain(t.iter())
        .map(|v| format_real(*v))
        .collect()
}

/// Parses the seven pose columns starting at field `start`.
pub fn parse_pose(row: &Row<'_>, start: usize) -> Result<Pose, DatastoreError> {
    let mut v = [0.0; 7];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = row.real(start + k)?;
    }
    let q = [v[0], v[1], v[2], v[3]];
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(row.error(format!("quaternion norm {norm} is not 1")));
    }
    Pose::from_wxyz(q, Vector3::new(v[4], v[5], v[6]))
        .ok_or_else(|| row.error("invalid pose"))
}

fn parse_camera(row: &Row<'_>) -> Result<Camera, DatastoreError> {
    if row.fields.len() < 4 {
        return Err(row.error("sensor rows need id, model, width, height, params"));
    }
    let model: CameraModel = row
        .str(1)?
        .parse()
        .map_err(|e: crate::geometry::GeometryError| row.error(e.to_string()))?;
    row.expect_len(&[4 + model.num_params()])?;
    let params = (4..row.fields.len())
        .map(|i| row.real(i))
        .collect::<Result<Vec<_>, _>>()?;
    let cam = Camera {
        sensor_id: row.str(0)?.to_string(),
        model,
        width: row.parse(2)?,
        height: row.parse(3)?,
        params,
    };
    cam.validate().map_err(|e| row.error(e.to_string()))?;
    Ok(cam)
}

fn load_records(
    root: &Path,
    rel: &str,
) -> Result<BTreeMap<(u64, String), String>, DatastoreError> {
    let mut out = BTreeMap::new();
    if let Some(table) = Table::read(&root.join(rel))? {
        for row in table.rows() {
            row.expect_len(&[3])?;
            let key = (row.parse::<u64>(0)?, row.str(1)?.to_string());
            if out.insert(key, row.str(2)?.to_string()).is_some() {
                return Err(row.error("duplicate record key"));
            }
        }
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatastoreError> {
    let sensors_path = root.join(SENSORS_FILE);
    let sensors =
        Table::read(&sensors_path)?.ok_or(DatastoreError::MissingFile(sensors_path))?;
    let mut ds = Dataset::default();
    for row in sensors.rows() {
        ds.cameras.push(parse_camera(&row)?);
    }

    if let Some(table) = Table::read(&root.join(RIGS_FILE))? {
        let mut rigs: BTreeMap<String, Vec<RigMember>> = BTreeMap::new();
        for row in table.rows() {
            row.expect_len(&[9])?;
            let sensor_id = row.str(1)?.to_string();
            if ds.camera(&sensor_id).is_none() {
                return Err(DatastoreError::UnknownSensorRef(sensor_id));
            }
            rigs.entry(row.str(0)?.to_string())
                .or_default()
                .push(RigMember { sensor_id, pose: parse_pose(&row, 2)? });
        }
        ds.rigs = rigs
            .into_iter()
            .map(|(rig_id, members)| Rig { rig_id, members })
            .collect();
    }

    if let Some(table) = Table::read(&root.join(TRAJECTORIES_FILE))? {
        let mut traj = Trajectories::new();
        for row in table.rows() {
            row.expect_len(&[9])?;
            let device = row.str(1)?.to_string();
            if ds.camera(&device).is_none() && ds.rig(&device).is_none() {
                return Err(DatastoreError::UnknownSensorRef(device));
            }
            traj.insert(row.parse(0)?, device, parse_pose(&row, 2)?)
                .map_err(|_| row.error("duplicate trajectory key"))?;
        }
        ds.trajectories = traj;
    }

    ds.image_records = load_records(root, RECORDS_CAMERA_FILE)?;
    ds.depth_records = load_records(root, RECORDS_DEPTH_FILE)?;
    for (_, sensor) in ds.image_records.keys().chain(ds.depth_records.keys()) {
        if ds.camera(sensor).is_none() {
            return Err(DatastoreError::UnknownSensorRef(sensor.clone()));
        }
    }
    for path in ds.depth_records.values() {
        if !ds.depth_maps.contains_key(path) {
            let depth = load_depth_map(&join_rel(&root.join(RECORDS_DATA_DIR), path))?;
            ds.depth_maps.insert(path.clone(), depth);
        }
    }

    for (name, set) in load_feature_sets(&root.join(KEYPOINTS_DIR), "keypoints", KEYPOINTS_EXT)? {
        ds.features.keypoints.insert(name, set);
    }
    for (name, set) in
        load_feature_sets(&root.join(DESCRIPTORS_DIR), "descriptors", DESCRIPTORS_EXT)?
    {
        ds.features.descriptors.insert(name, set);
    }
    for (name, set) in
        load_feature_sets(&root.join(GLOBAL_FEATURES_DIR), "global_features", GLOBAL_EXT)?
    {
        ds.features.global_features.insert(name, set);
    }
    load_matches(root, &mut ds)?;
    ds.map = load_map(root)?;

    ds.validate()?;
    Ok(ds)
}

fn load_matches(root: &Path, ds: &mut Dataset) -> Result<(), DatastoreError> {
    let parent = root.join(MATCHES_DIR);
    if !parent.is_dir() {
        return Ok(());
    }
    let mut dirs: Vec<_> = fs::read_dir(&parent)
        .map_err(|e| DatastoreError::io(&parent, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut pairs = PairMatches::new();
        for rel in list_files(&dir, MATCHES_EXT)? {
            let path = join_rel(&dir, &rel);
            let stem = &rel[..rel.len() - MATCHES_EXT.len()];
            let (a, b) = stem.split_once(OVERLAPPING).ok_or_else(|| {
                DatastoreError::BinaryShapeMismatch {
                    path: path.clone(),
                    reason: "match file not under an `.overlapping` directory".into(),
                }
            })?;
            let values = decode_f32(&path, &read_bytes(&path)?)?;
            if values.len() % 3 != 0 {
                return Err(DatastoreError::BinaryShapeMismatch {
                    path,
                    reason: "match rows need 3 columns".into(),
                });
            }
            let mut list = Vec::with_capacity(values.len() / 3);
            for c in values.chunks_exact(3) {
                let as_index = |v: f32| {
                    (v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0).then_some(v as usize)
                };
                match (as_index(c[0]), as_index(c[1])) {
                    (Some(idx_a), Some(idx_b)) => {
                        list.push(KeypointMatch { idx_a, idx_b, score: c[2] })
                    }
                    _ => {
                        return Err(DatastoreError::BinaryShapeMismatch {
                            path,
                            reason: "match indices must be non-negative integers".into(),
                        })
                    }
                }
            }
            pairs.insert((a.to_string(), b.to_string()), list);
        }
        ds.features.matches.insert(name, pairs);
    }
    Ok(())
}

fn load_map(root: &Path) -> Result<Option<ReconstructedMap>, DatastoreError> {
    let points = Table::read(&root.join(POINTS3D_FILE))?;
    let observations = Table::read(&root.join(OBSERVATIONS_FILE))?;
    if points.is_none() && observations.is_none() {
        return Ok(None);
    }
    let mut map = ReconstructedMap::default();
    if let Some(table) = &points {
        for row in table.rows() {
            row.expect_len(&[4, 7])?;
            let id: u64 = row.parse(0)?;
            let xyz = Vector3::new(row.real(1)?, row.real(2)?, row.real(3)?);
            let rgb = if row.fields.len() == 7 {
                Some([row.parse(4)?, row.parse(5)?, row.parse(6)?])
            } else {
                None
            };
            if map.points.insert(id, MapPoint { xyz, rgb }).is_some() {
                return Err(row.error(format!("duplicate point id {id}")));
            }
        }
    }
    if let Some(table) = &observations {
        let mut kpt_type: Option<String> = None;
        for row in table.rows() {
            row.expect_len(&[4])?;
            let id: u64 = row.parse(0)?;
            let t = row.str(1)?;
            match &kpt_type {
                None => kpt_type = Some(t.to_string()),
                Some(k) if k != t => return Err(row.error("mixed keypoint types")),
                _ => {}
            }
            if !map.points.contains_key(&id) {
                return Err(DatastoreError::DanglingObservation(id));
            }
            map.observations
                .entry(id)
                .or_default()
                .push((row.str(2)?.to_string(), row.parse(3)?));
        }
        map.keypoints_type = kpt_type.unwrap_or_default();
    }
    for obs in map.observations.values_mut() {
        obs.sort();
    }
    Ok(Some(map))
}

/// Writes a dataset with deterministic row order; optional files are only
/// written when non-empty.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<(), DatastoreError> {
    ds.validate()?;

    let mut cameras: Vec<&Camera> = ds.cameras.iter().collect();
    cameras.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
    let mut w = TableWriter::new("sensors");
    for c in cameras {
        let mut fields = vec![
            c.sensor_id.clone(),
            c.model.name().to_string(),
            c.width.to_string(),
            c.height.to_string(),
        ];
        fields.extend(c.params.iter().map(|p| format_real(*p)));
        w.row(fields);
    }
    w.write_to(&root.join(SENSORS_FILE))?;

    if !ds.rigs.is_empty() {
        let mut rows: Vec<(&str, &RigMember)> = ds
            .rigs
            .iter()
            .flat_map(|r| r.members.iter().map(move |m| (r.rig_id.as_str(), m)))
            .collect();
        rows.sort_by(|a, b| (a.0, &a.1.sensor_id).cmp(&(b.0, &b.1.sensor_id)));
        let mut w = TableWriter::new("rigs");
        for (rig_id, m) in rows {
            let mut fields = vec![rig_id.to_string(), m.sensor_id.clone()];
            fields.extend(pose_fields(&m.pose));
            w.row(fields);
        }
        w.write_to(&root.join(RIGS_FILE))?;
    }

    if !ds.trajectories.is_empty() {
        let mut w = TableWriter::new("trajectories");
        for ((ts, device), pose) in ds.trajectories.iter() {
            let mut fields = vec![ts.to_string(), device.clone()];
            fields.extend(pose_fields(pose));
            w.row(fields);
        }
        w.write_to(&root.join(TRAJECTORIES_FILE))?;
    }

    for (file, name, records) in [
        (RECORDS_CAMERA_FILE, "records_camera", &ds.image_records),
        (RECORDS_DEPTH_FILE, "records_depth", &ds.depth_records),
    ] {
        if records.is_empty() {
            continue;
        }
        let mut w = TableWriter::new(name);
        for ((ts, sensor), path) in records {
            w.row([ts.to_string(), sensor.clone(), path.clone()]);
        }
        w.write_to(&root.join(file))?;
    }
    for (path, depth) in &ds.depth_maps {
        save_depth_map(&join_rel(&root.join(RECORDS_DATA_DIR), path), depth)?;
    }

    let fs = &ds.features;
    for (name, set) in &fs.keypoints {
        save_feature_set(&root.join(KEYPOINTS_DIR).join(name), "keypoints", name, KEYPOINTS_EXT, set)?;
    }
    for (name, set) in &fs.descriptors {
        save_feature_set(
            &root.join(DESCRIPTORS_DIR).join(name),
            "descriptors",
            name,
            DESCRIPTORS_EXT,
            set,
        )?;
    }
    for (name, set) in &fs.global_features {
        save_feature_set(
            &root.join(GLOBAL_FEATURES_DIR).join(name),
            "global_features",
            name,
            GLOBAL_EXT,
            set,
        )?;
    }
    for (name, pairs) in &fs.matches {
        let dir = root.join(MATCHES_DIR).join(name);
        for ((a, b), list) in pairs {
            let values: Vec<f32> = list
                .iter()
                .flat_map(|m| [m.idx_a as f32, m.idx_b as f32, m.score])
                .collect();
            let rel = format!("{a}{OVERLAPPING}{b}{MATCHES_EXT}");
            write_file(&join_rel(&dir, &rel), &encode_f32(&values))?;
        }
    }

    if let Some(map) = &ds.map {
        let mut w = TableWriter::new("points3d");
        for (id, p) in &map.points {
            let mut fields = vec![id.to_string()];
            fields.extend(p.xyz.iter().map(|v| format_real(*v)));
            if let Some(rgb) = p.rgb {
                fields.extend(rgb.iter().map(|c| c.to_string()));
            }
            w.row(fields);
        }
        w.write_to(&root.join(POINTS3D_FILE))?;
        let mut w = TableWriter::new("observations");
        for (id, obs) in &map.observations {
            let mut obs = obs.clone();
            obs.sort();
            for (image, kp) in obs {
                w.row([id.to_string(), map.keypoints_type.clone(), image, kp.to_string()]);
            }
        }
        w.write_to(&root.join(OBSERVATIONS_FILE))?;
    }
    Ok(())
}

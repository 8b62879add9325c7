//! Absolute pose of query images against a reconstructed map: retrieval,
//! 2D-2D matching lifted to 2D-3D correspondences, P3P inside RANSAC and a
//! final nonlinear polish.

mod p3p;
mod ransac;
mod refine;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::csv::{Table, TableWriter};
use crate::datastore::{parse_pose, pose_fields, Dataset, DatastoreError, FeatureArray, FeatureSet, KeypointMatch, ReconstructedMap};
use crate::fusion::FusionParams;
use crate::geometry::{Point2, Point3, Pose};
use crate::matching::{match_pairs, MatchParams, MatchingError};
use crate::pairing::{fused_retrieval_pairs, retrieval_pairs, PairList, PairingError, RetrievalParams};
use crate::profile::Profile;

pub use p3p::solve_p3p;
pub use ransac::{ransac_estimate, ransac_pnp, required_iterations, RansacEstimate};
pub use refine::{refine_pose, refine_pose_trace, reprojection_cost};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("the three 3D points are collinear")]
    CollinearPoints,
    #[error("no real P3P solution")]
    NoRealSolution,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing features: {0}")]
    MissingFeatures(String),
    #[error("the map dataset has no reconstruction")]
    MissingMap,
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    /// Query keypoint the pixel comes from.
    pub keypoint_idx: usize,
    pub pixel: Point2,
    pub point_id: u64,
    pub xyz: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnPConfig {
    pub max_error_px: f64,
    pub min_num_inliers: usize,
    pub min_inlier_ratio: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl PnPConfig {
    pub fn config1() -> Self {
        Self {
            max_error_px: 12.0,
            min_num_inliers: 30,
            min_inlier_ratio: 0.25,
            confidence: 0.9999,
            max_iterations: 10000,
            seed: 0,
        }
    }

    pub fn config2() -> Self {
        Self { max_error_px: 20.0, min_num_inliers: 4, min_inlier_ratio: 0.05, ..Self::config1() }
    }

    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Config1 => Self::config1(),
            Profile::Config2 => Self::config2(),
        }
    }

    /// Inlier-count and inlier-ratio gates.
    pub fn accepts(&self, num_inliers: usize, num_correspondences: usize) -> bool {
        num_correspondences > 0
            && num_inliers >= self.min_num_inliers
            && num_inliers as f64 / num_correspondences as f64 >= self.min_inlier_ratio
    }

    pub fn validate(&self) -> Result<(), LocalizationError> {
        let problem = if !(self.max_error_px > 0.0) {
            "max_error_px must be positive"
        } else if self.min_num_inliers == 0 {
            "min_num_inliers must be at least 1"
        } else if !(self.min_inlier_ratio > 0.0 && self.min_inlier_ratio <= 1.0) {
            "min_inlier_ratio must lie in (0, 1]"
        } else if !(self.confidence > 0.0 && self.confidence < 1.0) {
            "confidence must lie in (0, 1)"
        } else if self.max_iterations == 0 {
            "max_iterations must be at least 1"
        } else {
            return Ok(());
        };
        Err(LocalizationError::InvalidInput(format!("invalid PnP configuration: {problem}")))
    }
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self::config1()
    }
}

/// How a result's pose was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Direct,
    Rig,
    SequenceInterp,
    SequenceNn,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Direct => "DIRECT",
            Provenance::Rig => "RIG",
            Provenance::SequenceInterp => "SEQUENCE_INTERP",
            Provenance::SequenceNn => "SEQUENCE_NN",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Provenance::Direct, Provenance::Rig, Provenance::SequenceInterp, Provenance::SequenceNn]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown provenance `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub image_path: String,
    pub pose: Option<Pose>,
    pub num_inliers: usize,
    pub num_correspondences: usize,
    pub provenance: Provenance,
}

impl LocalizationResult {
    pub fn unlocalized(image_path: impl Into<String>) -> Self {
        Self {
            image_path: image_path.into(),
            pose: None,
            num_inliers: 0,
            num_correspondences: 0,
            provenance: Provenance::Direct,
        }
    }

    pub fn is_localized(&self) -> bool {
        self.pose.is_some()
    }
}

/// Writes results sorted by image path; unlocalized rows leave the pose
/// columns empty.
pub fn save_results(path: &Path, results: &[LocalizationResult]) -> Result<(), DatastoreError> {
    let mut sorted: Vec<&LocalizationResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    let mut w = TableWriter::new("localization_results");
    for r in sorted {
        let mut row = vec![r.image_path.clone()];
        match &r.pose {
            Some(p) => row.extend(pose_fields(p)),
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        row.extend([r.num_inliers.to_string(), r.num_correspondences.to_string(), r.provenance.to_string()]);
        w.row(row);
    }
    w.write_to(path)
}

pub fn load_results(path: &Path) -> Result<Vec<LocalizationResult>, DatastoreError> {
    let table = Table::read(path)?.ok_or_else(|| DatastoreError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for row in table.rows() {
        row.expect_len(&[11])?;
        let pose = if row.fields[1..8].iter().all(|f| f.is_empty()) { None } else { Some(parse_pose(&row, 1)?) };
        out.push(LocalizationResult {
            image_path: row.str(0)?.to_string(),
            pose,
            num_inliers: row.parse(8)?,
            num_correspondences: row.parse(9)?,
            provenance: row.str(10)?.parse().map_err(|e: String| row.error(e))?,
        });
    }
    Ok(out)
}

/// Lifts query-to-database matches to 2D-3D correspondences through the
/// map's observations. A query keypoint reaching the same point through
/// several database images yields one correspondence. Output is sorted by
/// `(keypoint_idx, point_id)`.
pub fn assemble_2d3d(
    query_keypoints: &FeatureArray,
    matches: &[(&str, &[KeypointMatch])],
    map: &ReconstructedMap,
) -> Vec<Correspondence2D3D> {
    let index = map.keypoint_index();
    let mut seen = BTreeSet::new();
    for (db_image, ms) in matches {
        for m in ms.iter() {
            if let Some(id) = index.get(&(*db_image, m.idx_b)) {
                seen.insert((m.idx_a, *id));
            }
        }
    }
    seen.into_iter()
        .map(|(k, id)| Correspondence2D3D {
            keypoint_idx: k,
            pixel: query_keypoints.keypoint(k),
            point_id: id,
            xyz: map.points[&id].xyz,
        })
        .collect()
}

/// Everything a query needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeParams {
    pub retrieval: RetrievalParams,
    /// Additional global descriptor types fused with `retrieval.descriptor_type`.
    pub extra_descriptor_types: Vec<String>,
    pub fusion: Option<FusionParams>,
    pub matching: MatchParams,
    pub pnp: PnPConfig,
}

impl LocalizeParams {
    pub fn preset(profile: Profile) -> Self {
        Self {
            retrieval: RetrievalParams::default(),
            extra_descriptor_types: Vec::new(),
            fusion: None,
            matching: MatchParams::preset(profile),
            pnp: PnPConfig::preset(profile),
        }
    }
}

/// Seed of one query's RANSAC: the global seed mixed with a hash of the path.
pub fn query_seed(seed: u64, image: &str) -> u64 {
    // 64-bit FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

struct Sources<'a> {
    map: &'a ReconstructedMap,
    query_kpts: &'a FeatureSet,
    query_desc: &'a FeatureSet,
    db_desc: &'a FeatureSet,
}

fn sources<'a>(query: &'a Dataset, db: &'a Dataset) -> Result<Sources<'a>, LocalizationError> {
    let map = db.map.as_ref().ok_or(LocalizationError::MissingMap)?;
    let qtype = query
        .features
        .default_keypoints_type()
        .ok_or_else(|| LocalizationError::MissingFeatures("query needs exactly one keypoint type".into()))?;
    let missing = |what: &str| LocalizationError::MissingFeatures(what.to_string());
    Ok(Sources {
        map,
        query_kpts: &query.features.keypoints[qtype],
        query_desc: query.features.descriptors.get(qtype).ok_or_else(|| missing("query descriptors"))?,
        db_desc: db.features.descriptors.get(&map.keypoints_type).ok_or_else(|| missing("map descriptors"))?,
    })
}

/// Shortlist of database images per query, by (optionally fused) retrieval.
pub fn retrieve(query: &Dataset, db: &Dataset, params: &LocalizeParams) -> Result<PairList, LocalizationError> {
    let types = descriptor_types(query, params)?;
    if types.len() == 1 {
        let params = RetrievalParams { descriptor_type: types[0].clone(), ..params.retrieval.clone() };
        return Ok(retrieval_pairs(global_set(query, &types[0], "query")?, global_set(db, &types[0], "map")?, &params)?);
    }
    let q: Vec<&FeatureSet> = types.iter().map(|t| global_set(query, t, "query")).collect::<Result<_, _>>()?;
    let d: Vec<&FeatureSet> = types.iter().map(|t| global_set(db, t, "map")).collect::<Result<_, _>>()?;
    let fusion = params.fusion.clone().unwrap_or_default();
    Ok(fused_retrieval_pairs(&q, &d, params.retrieval.k, &fusion)?)
}

fn global_set<'a>(ds: &'a Dataset, t: &str, who: &str) -> Result<&'a FeatureSet, LocalizationError> {
    ds.features
        .global_features
        .get(t)
        .ok_or_else(|| LocalizationError::MissingFeatures(format!("{who} global features `{t}`")))
}

fn descriptor_types(query: &Dataset, params: &LocalizeParams) -> Result<Vec<String>, LocalizationError> {
    let mut types = Vec::new();
    if params.retrieval.descriptor_type.is_empty() {
        let mut it = query.features.global_features.keys();
        match (it.next(), it.next()) {
            (Some(t), None) => types.push(t.clone()),
            _ => {
                return Err(LocalizationError::MissingFeatures(
                    "name a global descriptor type (the query has none or several)".into(),
                ))
            }
        }
    } else {
        types.push(params.retrieval.descriptor_type.clone());
    }
    types.extend(params.extra_descriptor_types.iter().cloned());
    Ok(types)
}

fn localize_with_sources(
    src: &Sources<'_>,
    query: &Dataset,
    image: &str,
    db_images: &[&str],
    params: &LocalizeParams,
) -> Result<LocalizationResult, LocalizationError> {
    let cam = query
        .camera_of_image(image)
        .ok_or_else(|| LocalizationError::InvalidInput(format!("no camera for query `{image}`")))?;
    let kpts = src
        .query_kpts
        .get(image)
        .ok_or_else(|| LocalizationError::MissingFeatures(format!("keypoints of `{image}`")))?;
    let matches = match_pairs(src.query_desc, src.db_desc, db_images.iter().map(|d| (image, *d)), &params.matching)?;
    let per_image: Vec<(&str, &[KeypointMatch])> =
        db_images.iter().copied().zip(matches.iter().map(|m| m.as_slice())).collect();
    let corrs = assemble_2d3d(kpts, &per_image, src.map);
    let mut result = LocalizationResult::unlocalized(image);
    result.num_correspondences = corrs.len();
    let cfg = PnPConfig { seed: query_seed(params.pnp.seed, image), ..params.pnp };
    if let Some(est) = ransac_estimate(&corrs, cam, &cfg) {
        result.num_inliers = est.inliers.len();
        if cfg.accepts(est.inliers.len(), corrs.len()) {
            result.pose = Some(est.pose);
        }
    }
    Ok(result)
}

/// Localizes one query image against `db_images` of the map dataset.
pub fn localize_against(
    query: &Dataset,
    db: &Dataset,
    image: &str,
    db_images: &[&str],
    params: &LocalizeParams,
) -> Result<LocalizationResult, LocalizationError> {
    params.pnp.validate()?;
    let src = sources(query, db)?;
    localize_with_sources(&src, query, image, db_images, params)
}

/// Retrieval, matching, 2D-3D lifting and robust pose estimation for one
/// query image.
pub fn localize_query(
    query: &Dataset,
    db: &Dataset,
    image: &str,
    params: &LocalizeParams,
) -> Result<LocalizationResult, LocalizationError> {
    let mut single = query.clone();
    for set in single.features.global_features.values_mut() {
        set.arrays.retain(|k, _| k == image);
    }
    let pairs = retrieve(&single, db, params)?;
    let db_images: Vec<&str> = pairs.iter().map(|p| p.image_b.as_str()).collect();
    localize_against(query, db, image, &db_images, params)
}

/// Localizes every query image in parallel, using `pairs` as the shortlist
/// when given and retrieval otherwise. Results are sorted by image path.
pub fn localize_all(
    query: &Dataset,
    db: &Dataset,
    pairs: Option<&PairList>,
    params: &LocalizeParams,
) -> Result<Vec<LocalizationResult>, LocalizationError> {
    params.pnp.validate()?;
    let src = sources(query, db)?;
    let retrieved;
    let pairs = match pairs {
        Some(p) => p,
        None => {
            retrieved = retrieve(query, db, params)?;
            &retrieved
        }
    };
    let images = query.images();
    let mut shortlist: BTreeMap<&str, Vec<&str>> = images.iter().map(|i| (i.as_str(), Vec::new())).collect();
    for p in pairs.iter() {
        if let Some(v) = shortlist.get_mut(p.image_a.as_str()) {
            v.push(p.image_b.as_str());
        }
    }
    let work: Vec<(&str, Vec<&str>)> = shortlist.into_iter().collect();
    work.par_iter()
        .map(|(image, db_images)| localize_with_sources(&src, query, image, db_images, params))
        .collect()
}

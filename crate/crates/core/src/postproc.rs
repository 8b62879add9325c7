//! Completion of unlocalized queries from localized neighbours: in space
//! through rig calibration, in time along each camera stream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastore::Dataset;
use crate::geometry::{slerp, Pose};
use crate::localization::{LocalizationResult, Provenance};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceParams {
    /// Largest timestamp gap bridged by a completion; `None` is unlimited.
    pub max_gap: Option<u64>,
}

/// Which completions to run; rig completion always goes first so it can
/// supply anchors for the sequence pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostprocMode {
    Rig,
    Sequence,
    RigSequence,
}

impl std::str::FromStr for PostprocMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rig" => Ok(PostprocMode::Rig),
            "seq" | "sequence" => Ok(PostprocMode::Sequence),
            "rig+seq" | "rig_seq" => Ok(PostprocMode::RigSequence),
            _ => Err(format!("unknown post-processing mode `{s}` (rig, seq, rig+seq)")),
        }
    }
}

fn is_direct(r: &LocalizationResult) -> bool {
    r.pose.is_some() && r.provenance == Provenance::Direct
}

fn sorted(mut results: Vec<LocalizationResult>) -> Vec<LocalizationResult> {
    results.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    results
}

/// Propagates poses inside each `(timestamp, rig)` group from the DIRECT
/// member with most inliers (ties by sensor id) to the unlocalized ones.
/// Results are returned sorted by image path.
pub fn rig_complete(results: &[LocalizationResult], query: &Dataset) -> Vec<LocalizationResult> {
    let index = query.image_index();
    let mut out = results.to_vec();
    // (timestamp, rig_id) -> [(sensor_id, result index)]
    let mut groups: BTreeMap<(u64, &str), Vec<(&str, usize)>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        let Some((ts, sensor)) = index.get(r.image_path.as_str()) else { continue };
        if let Some(rig) = query.rig_of_sensor(sensor) {
            groups.entry((*ts, rig.rig_id.as_str())).or_default().push((sensor.as_str(), i));
        }
    }
    for ((_, rig_id), members) in groups {
        let rig = query.rig(rig_id).expect("rig resolved above");
        let reference = members
            .iter()
            .filter(|(_, i)| is_direct(&results[*i]))
            .min_by(|(sa, a), (sb, b)| results[*b].num_inliers.cmp(&results[*a].num_inliers).then(sa.cmp(sb)));
        let Some((ref_sensor, ref_i)) = reference else { continue };
        let rig_to_ref = rig.member(ref_sensor).expect("member of its rig").pose;
        let world_to_rig = rig_to_ref.inverse().compose(&results[*ref_i].pose.expect("direct result has a pose"));
        for (sensor, i) in &members {
            if out[*i].pose.is_none() {
                let rig_to_sensor = rig.member(sensor).expect("member of its rig").pose;
                out[*i].pose = Some(rig_to_sensor.compose(&world_to_rig));
                out[*i].provenance = Provenance::Rig;
            }
        }
    }
    sorted(out)
}

/// Fills unlocalized queries of each camera stream from the closest
/// anchors in time, DIRECT or RIG results. With anchors on both sides the
/// camera centre is interpolated linearly and the rotation spherically;
/// otherwise, or when the bracket exceeds `max_gap`, the nearest anchor
/// within `max_gap` is copied. Results are returned sorted by image path.
pub fn sequence_complete(
    results: &[LocalizationResult],
    query: &Dataset,
    params: &SequenceParams,
) -> Vec<LocalizationResult> {
    let index = query.image_index();
    let within = |gap: u64| params.max_gap.is_none_or(|g| gap <= g);
    let mut out = results.to_vec();
    let mut streams: BTreeMap<&str, Vec<(u64, usize)>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        if let Some((ts, sensor)) = index.get(r.image_path.as_str()) {
            streams.entry(sensor.as_str()).or_default().push((*ts, i));
        }
    }
    for stream in streams.values_mut() {
        stream.sort();
        let anchors: Vec<(u64, Pose)> = stream
            .iter()
            .filter(|(_, i)| {
                let r = &results[*i];
                r.pose.is_some() && matches!(r.provenance, Provenance::Direct | Provenance::Rig)
            })
            .map(|(t, i)| (*t, results[*i].pose.expect("filtered on pose")))
            .collect();
        for (t, i) in stream.iter() {
            if out[*i].pose.is_some() {
                continue;
            }
            let after = anchors.partition_point(|(ta, _)| ta < t);
            let before = anchors[..after].last();
            let next = anchors.get(after);
            let completed = match (before, next) {
                (Some((t0, p0)), Some((t1, p1))) if within(t1 - t0) => {
                    let lambda = if t1 == t0 { 0.0 } else { (t - t0) as f64 / (t1 - t0) as f64 };
                    let c = p0.center() + (p1.center() - p0.center()) * lambda;
                    Some((Pose::from_center(slerp(p0.rotation(), p1.rotation(), lambda), c), Provenance::SequenceInterp))
                }
                _ => {
                    let candidates = [before.map(|(ta, p)| (t - ta, *p)), next.map(|(ta, p)| (ta - t, *p))];
                    candidates
                        .into_iter()
                        .flatten()
                        .filter(|(gap, _)| within(*gap))
                        .min_by_key(|(gap, _)| *gap)
                        .map(|(_, p)| (p, Provenance::SequenceNn))
                }
            };
            if let Some((pose, provenance)) = completed {
                out[*i].pose = Some(pose);
                out[*i].provenance = provenance;
            }
        }
    }
    sorted(out)
}

pub fn postprocess(
    results: &[LocalizationResult],
    query: &Dataset,
    mode: PostprocMode,
    params: &SequenceParams,
) -> Vec<LocalizationResult> {
    match mode {
        PostprocMode::Rig => rig_complete(results, query),
        PostprocMode::Sequence => sequence_complete(results, query, params),
        PostprocMode::RigSequence => sequence_complete(&rig_complete(results, query), query, params),
    }
}

use rayon::prelude::*;

use crate::datastore::FeatureSet;
use crate::fusion::{fuse_scores, normalize_scores, round_robin, FusionMethod, FusionParams};

use super::{top_k, PairList, PairingError};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalParams {
    pub k: usize,
    pub descriptor_type: String,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { k: 20, descriptor_type: String::new() }
    }
}

fn normalized(image: &str, v: &[f32], dim: usize) -> Result<Vec<f64>, PairingError> {
    if v.len() != dim {
        return Err(PairingError::DimensionMismatch {
            image: image.to_string(),
            expected: dim,
            got: v.len(),
        });
    }
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    Ok(if norm > 0.0 {
        v.iter().map(|x| *x as f64 / norm).collect()
    } else {
        vec![0.0; dim]
    })
}

/// Cosine similarity of `query` against every database image except itself,
/// in database path order.
pub fn retrieval_scores(
    query_image: &str,
    query: &[f32],
    db: &FeatureSet,
) -> Result<Vec<(String, f64)>, PairingError> {
    let q = normalized(query_image, query, db.dsize)?;
    db.arrays
        .iter()
        .filter(|(path, _)| path.as_str() != query_image)
        .map(|(path, arr)| {
            let d = normalized(path, arr.row(0), db.dsize)?;
            Ok((path.clone(), q.iter().zip(&d).map(|(a, b)| a * b).sum()))
        })
        .collect()
}

/// Top-`k` database images per query by global descriptor similarity.
pub fn retrieval_pairs(
    queries: &FeatureSet,
    db: &FeatureSet,
    params: &RetrievalParams,
) -> Result<PairList, PairingError> {
    if params.k == 0 {
        return Err(PairingError::InvalidParams("k must be at least 1".into()));
    }
    let per_query: Vec<Vec<(String, f64)>> = queries
        .arrays
        .par_iter()
        .map(|(image, arr)| Ok(top_k(retrieval_scores(image, arr.row(0), db)?, params.k, true)))
        .collect::<Result<_, PairingError>>()?;
    let mut list = PairList::new();
    for ((image, _), ranked) in queries.arrays.iter().zip(per_query) {
        for (db_image, score) in ranked {
            list.push(image.clone(), db_image, score);
        }
    }
    Ok(list)
}

/// Top-`k` retrieval fusing several global descriptor types.
///
/// Score operators fuse min-max normalized similarities; round robin merges
/// the per-type rankings and scores rank `r` as `1 / (r + 1)`.
pub fn fused_retrieval_pairs(
    queries: &[&FeatureSet],
    db: &[&FeatureSet],
    k: usize,
    fusion: &FusionParams,
) -> Result<PairList, PairingError> {
    if queries.is_empty() || queries.len() != db.len() {
        return Err(PairingError::InvalidParams(
            "need one query and one database feature set per descriptor type".into(),
        ));
    }
    if k == 0 {
        return Err(PairingError::InvalidParams("k must be at least 1".into()));
    }
    let images: Vec<&String> = queries[0].arrays.keys().collect();
    let per_query: Vec<Vec<(String, f64)>> = images
        .par_iter()
        .map(|image| {
            let mut raw: Vec<Vec<(String, f64)>> = Vec::with_capacity(queries.len());
            for (qset, dset) in queries.iter().zip(db) {
                let arr = qset.get(image).ok_or_else(|| PairingError::DimensionMismatch {
                    image: image.to_string(),
                    expected: qset.dsize,
                    got: 0,
                })?;
                raw.push(retrieval_scores(image, arr.row(0), dset)?);
            }
            // Align every descriptor type on the first one's database list.
            let names: Vec<String> = raw[0].iter().map(|(p, _)| p.clone()).collect();
            if raw.iter().any(|r| r.len() != names.len() || r.iter().zip(&names).any(|(a, n)| &a.0 != n)) {
                return Err(PairingError::InvalidParams(
                    "descriptor types cover different database images".into(),
                ));
            }
            if fusion.method == FusionMethod::RoundRobin {
                let rankings: Vec<Vec<String>> = raw
                    .into_iter()
                    .map(|r| top_k(r, usize::MAX, true).into_iter().map(|(p, _)| p).collect())
                    .collect();
                return Ok(round_robin(&rankings)
                    .into_iter()
                    .take(k)
                    .enumerate()
                    .map(|(r, p)| (p, 1.0 / (r as f64 + 1.0)))
                    .collect());
            }
            let lists: Vec<Vec<f64>> =
                raw.iter().map(|r| r.iter().map(|(_, s)| *s).collect()).collect();
            let fused = fuse_scores(fusion, &normalize_scores(&lists))?;
            Ok(top_k(names.into_iter().zip(fused).collect(), k, true))
        })
        .collect::<Result<_, PairingError>>()?;
    let mut list = PairList::new();
    for (image, ranked) in images.into_iter().zip(per_query) {
        for (db_image, score) in ranked {
            list.push(image.clone(), db_image, score);
        }
    }
    Ok(list)
}

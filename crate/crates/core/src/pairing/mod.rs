//! Image-pair shortlists for mapping and localization.
//!
//! Every strategy returns a [`PairList`] ordered by query image (path order)
//! and, within a query, by decreasing relevance.

mod covisibility;
mod distance;
mod frustum;
mod retrieval;

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::datastore::csv::{format_real, Table, TableWriter};
use crate::datastore::DatastoreError;

pub use covisibility::covisibility_pairs;
pub use distance::{distance_pairs, distance_score, DistancePairingParams};
pub use frustum::{frustum_overlap, frustum_pairs, FrustumParams};
pub use retrieval::{
    fused_retrieval_pairs, retrieval_pairs, retrieval_scores, RetrievalParams,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PairingError {
    #[error("descriptor of `{image}` has dimension {got}, expected {expected}")]
    DimensionMismatch { image: String, expected: usize, got: usize },
    #[error("image `{0}` has no pose")]
    MissingPose(String),
    #[error("invalid pairing parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image_a: String,
    pub image_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: impl Into<String>, b: impl Into<String>, score: f64) {
        self.pairs.push(Pair { image_a: a.into(), image_b: b.into(), score });
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter()
    }

    /// Partners of `image_a`, in list order.
    pub fn partners_of<'a>(&'a self, image_a: &'a str) -> impl Iterator<Item = &'a Pair> + 'a {
        self.pairs.iter().filter(move |p| p.image_a == image_a)
    }

    /// Drops self-pairs and keeps only the first occurrence of each unordered
    /// pair.
    pub fn dedup_symmetric(self) -> Self {
        let mut seen = HashSet::new();
        let pairs = self
            .pairs
            .into_iter()
            .filter(|p| {
                if p.image_a == p.image_b {
                    return false;
                }
                let key = if p.image_a < p.image_b {
                    (p.image_a.clone(), p.image_b.clone())
                } else {
                    (p.image_b.clone(), p.image_a.clone())
                };
                seen.insert(key)
            })
            .collect();
        Self { pairs }
    }

    pub fn to_csv(&self) -> String {
        let mut w = TableWriter::new("pairs");
        for p in &self.pairs {
            w.row([p.image_a.clone(), p.image_b.clone(), format_real(p.score)]);
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatastoreError> {
        crate::datastore::csv::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, DatastoreError> {
        let table =
            Table::read(path)?.ok_or_else(|| DatastoreError::MissingFile(path.to_path_buf()))?;
        let mut list = PairList::new();
        for row in table.rows() {
            row.expect_len(&[2, 3])?;
            let score = if row.fields.len() == 3 { row.real(2)? } else { 0.0 };
            list.push(row.str(0)?, row.str(1)?, score);
        }
        Ok(list)
    }
}

/// Sorts `(image, score)` candidates and keeps the best `k`. `descending`
/// selects the score direction; ties are broken by ascending path.
pub(crate) fn top_k(mut cands: Vec<(String, f64)>, k: usize, descending: bool) -> Vec<(String, f64)> {
    cands.sort_by(|a, b| {
        let ord = if descending { b.1.total_cmp(&a.1) } else { a.1.total_cmp(&b.1) };
        ord.then_with(|| a.0.cmp(&b.0))
    });
    cands.truncate(k);
    cands
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_removes_reverse_and_self() {
        let mut l = PairList::new();
        l.push("a", "b", 1.0);
        l.push("b", "a", 1.0);
        l.push("c", "c", 1.0);
        l.push("b", "c", 0.5);
        let d = l.dedup_symmetric();
        assert_eq!(d.len(), 2);
        assert_eq!(d.pairs[1].image_a, "b");
    }

    #[test]
    fn csv_round_trip() {
        let mut l = PairList::new();
        l.push("q/1.jpg", "db/7.jpg", 0.123456789012345);
        l.push("q/1.jpg", "db/2.jpg", -3.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.txt");
        l.save(&p).unwrap();
        assert_eq!(PairList::load(&p).unwrap(), l);
    }

    #[test]
    fn top_k_tie_break() {
        let c = vec![("b".to_string(), 1.0), ("a".to_string(), 1.0), ("c".to_string(), 2.0)];
        let t = top_k(c, 2, true);
        assert_eq!(t[0].0, "c");
        assert_eq!(t[1].0, "a");
    }
}

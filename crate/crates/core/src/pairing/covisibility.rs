use std::collections::{BTreeMap, BTreeSet};

use crate::datastore::ReconstructedMap;

use super::{top_k, PairList};

/// Each image's `k` partners sharing the most 3D points, symmetric-deduplicated.
/// Pairs with no shared point are omitted.
pub fn covisibility_pairs(map: &ReconstructedMap, k: usize) -> PairList {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for obs in map.observations.values() {
        let images: BTreeSet<&str> = obs.iter().map(|(img, _)| img.as_str()).collect();
        for a in &images {
            let row = counts.entry(a).or_default();
            for b in &images {
                if a != b {
                    *row.entry(b).or_default() += 1;
                }
            }
        }
    }
    let mut list = PairList::new();
    for (a, row) in &counts {
        let cands = row.iter().map(|(b, c)| (b.to_string(), *c as f64)).collect();
        for (b, s) in top_k(cands, k, true) {
            list.push(*a, b, s);
        }
    }
    list.dedup_symmetric()
}

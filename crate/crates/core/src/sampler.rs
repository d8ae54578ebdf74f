//! Label-free triplet selection over a pool of original and shifted series.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataset::{Origin, PoolEntry, SampleRef};
use crate::error::{Error, Result};
use crate::seed;

/// Indices into the pool. Carries no label information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPool {
    pub triplets: Vec<Triplet>,
    pub seed: u64,
}

impl TripletPool {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// `anchor,positive,negative` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("anchor,positive,negative\n");
        for t in &self.triplets {
            s.push_str(&format!("{},{},{}\n", t.anchor, t.positive, t.negative));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Where negatives are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeScope {
    /// Another original of the anchor's dataset.
    #[default]
    SameDataset,
    /// Any other original in the pool (ablation).
    AnyDataset,
}

/// For each original entry, `triplets_per_anchor` triplets with a uniformly
/// chosen shifted child as positive and a uniformly chosen other original as
/// negative.
pub fn make_triplets(
    pool: &[PoolEntry],
    triplets_per_anchor: usize,
    seed: u64,
    scope: NegativeScope,
) -> Result<TripletPool> {
    if triplets_per_anchor == 0 {
        return Err(Error::Pool("triplets per anchor must be positive".into()));
    }
    let mut index_of: BTreeMap<SampleRef, usize> = BTreeMap::new();
    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut all_originals = Vec::new();
    for (i, e) in pool.iter().enumerate() {
        if e.origin == Origin::Original {
            if index_of.insert(e.sample_ref(), i).is_some() {
                return Err(Error::Pool(format!(
                    "duplicate original {}#{}",
                    e.series.dataset_id, e.series.sample_id
                )));
            }
            by_dataset.entry(&e.series.dataset_id).or_default().push(i);
            all_originals.push(i);
        }
    }
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.iter().enumerate() {
        if e.origin == Origin::Shifted {
            let parent = e
                .parent_sample
                .as_ref()
                .and_then(|p| index_of.get(p))
                .ok_or_else(|| Error::Pool(format!("shifted entry {i} has no original parent in the pool")))?;
            children.entry(*parent).or_default().push(i);
        }
    }
    for (name, originals) in &by_dataset {
        if originals.len() < 2 && scope == NegativeScope::SameDataset {
            return Err(Error::Pool(format!(
                "dataset {name} has a single original sample; cannot form a negative"
            )));
        }
    }
    if all_originals.len() < 2 {
        return Err(Error::Pool("pool needs at least two original samples".into()));
    }

    let mut rng = seed::rng(seed);
    let mut triplets = Vec::with_capacity(all_originals.len() * triplets_per_anchor);
    for &anchor in &all_originals {
        let kids = children.get(&anchor).ok_or_else(|| {
            let e = &pool[anchor];
            Error::Pool(format!(
                "original {}#{} has no shifted variants",
                e.series.dataset_id, e.series.sample_id
            ))
        })?;
        let candidates = match scope {
            NegativeScope::SameDataset => &by_dataset[pool[anchor].series.dataset_id.as_str()],
            NegativeScope::AnyDataset => &all_originals,
        };
        let anchor_pos = candidates
            .iter()
            .position(|&c| c == anchor)
            .expect("anchor is among its own candidates");
        for _ in 0..triplets_per_anchor {
            let positive = kids[rng.random_range(0..kids.len())];
            // Uniform over the candidates excluding the anchor itself.
            let mut j = rng.random_range(0..candidates.len() - 1);
            if j >= anchor_pos {
                j += 1;
            }
            triplets.push(Triplet {
                anchor,
                positive,
                negative: candidates[j],
            });
        }
    }
    Ok(TripletPool { triplets, seed })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub triplet: usize,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "triplet {}: {}", self.triplet, self.reason)
    }
}

/// Checks every triplet against the pool; an empty report means valid.
pub fn validate_pool(tp: &TripletPool, pool: &[PoolEntry], scope: NegativeScope) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, t) in tp.triplets.iter().enumerate() {
        let mut bad = |reason: String| {
            out.push(Violation {
                triplet: i,
                reason,
            })
        };
        let (Some(a), Some(p), Some(n)) = (pool.get(t.anchor), pool.get(t.positive), pool.get(t.negative)) else {
            bad("reference out of range".into());
            continue;
        };
        if a.origin != Origin::Original {
            bad("anchor is not an original".into());
        }
        if p.origin != Origin::Shifted {
            bad("positive is not a shifted entry".into());
        } else if p.parent_sample.as_ref() != Some(&a.sample_ref()) {
            bad("positive is not derived from the anchor".into());
        }
        if n.origin != Origin::Original {
            bad("negative is not an original".into());
        }
        if scope == NegativeScope::SameDataset && n.series.dataset_id != a.series.dataset_id {
            bad(format!(
                "negative from dataset {} but anchor from {}",
                n.series.dataset_id, a.series.dataset_id
            ));
        }
        if n.sample_ref() == a.sample_ref() {
            bad("negative is the anchor sample".into());
        }
    }
    out
}

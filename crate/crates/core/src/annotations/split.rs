use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([8, 1, 1])
    }
}

/// piece_id → subset. Every version of a piece follows its piece.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub pieces: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn get(&self, piece_id: &str) -> Option<Subset> {
        self.pieces.get(piece_id).copied()
    }

    pub fn pieces_in(&self, subset: Subset) -> impl Iterator<Item = &str> + '_ {
        self.pieces
            .iter()
            .filter(move |(_, s)| **s == subset)
            .map(|(p, _)| p.as_str())
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.pieces_in(subset).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fails if any piece of `manifest` is unassigned.
    pub fn check_covers(&self, manifest: &Manifest) -> Result<()> {
        for piece in manifest.piece_ids() {
            if !self.pieces.contains_key(&piece) {
                return Err(Error::Leakage(format!("piece {piece} has no subset")));
            }
        }
        Ok(())
    }
}

/// Target piece counts: largest-remainder rounding of the ratios (ties broken
/// train → val → test), then every subset is guaranteed at least one piece.
pub(crate) fn subset_counts(n: usize, ratios: SplitRatios) -> [usize; 3] {
    let total: u64 = ratios.0.iter().map(|&r| r as u64).sum();
    let exact: Vec<f64> = ratios
        .0
        .iter()
        .map(|&r| n as f64 * r as f64 / total as f64)
        .collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        // integer floor avoids 35 * 0.8 = 27.999...
        counts[k] = (n as u64 * ratios.0[k] as u64 / total) as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    let frac = |k: usize| exact[k] - counts[k] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    for k in 1..3 {
        if counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

/// Shuffles the unique pieces under `seed` and cuts them into train/val/test.
pub fn split_dataset(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    if ratios.0.contains(&0) {
        return Err(Error::InvalidInput("split ratios must be positive".into()));
    }
    let mut pieces: Vec<String> = manifest.piece_ids().into_iter().collect();
    if pieces.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 unique pieces to split, found {}",
            pieces.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pieces.shuffle(&mut rng);
    let counts = subset_counts(pieces.len(), ratios);
    let mut assignment = SplitAssignment::default();
    let mut it = pieces.into_iter();
    for (subset, count) in Subset::ALL.into_iter().zip(counts) {
        for piece in it.by_ref().take(count) {
            assignment.pieces.insert(piece, subset);
        }
    }
    Ok(assignment)
}

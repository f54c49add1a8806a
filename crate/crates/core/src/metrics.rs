//! Boundary hit rates (HR3P / HR3R / HR3F) under one-to-one matching.

use serde::{Deserialize, Serialize};

use crate::annotations::BoundarySet;
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE_S: f64 = 3.0;

/// Maximum one-to-one matching of `reference` and `estimate` within `tol_s`.
///
/// With equal-width windows on a line a sorted sweep is optimal: an estimate
/// left of the current reference window can never match a later reference,
/// and symmetrically for references. Returns `(ref_index, est_index)` pairs.
pub fn match_boundaries(reference: &BoundarySet, estimate: &BoundarySet, tol_s: f64) -> Vec<(usize, usize)> {
    let (r, e) = (reference.times(), estimate.times());
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < r.len() && j < e.len() {
        if (r[i] - e[j]).abs() <= tol_s {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if e[j] < r[i] {
            j += 1;
        } else {
            i += 1;
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, n_ref: usize, n_est: usize) -> Prf {
        if n_ref == 0 && n_est == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, n_est);
        let recall = ratio(tp, n_ref);
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f }
    }
}

pub fn hit_rate(reference: &BoundarySet, estimate: &BoundarySet, tol_s: f64) -> Prf {
    let tp = match_boundaries(reference, estimate, tol_s).len();
    Prf::from_counts(tp, reference.len(), estimate.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceResult {
    pub piece_id: String,
    pub version_id: String,
    pub n_ref: usize,
    pub n_est: usize,
    pub tp: usize,
    #[serde(flatten)]
    pub scores: Prf,
}

pub fn evaluate_piece(piece_id: &str, version_id: &str, reference: &BoundarySet, estimate: &BoundarySet, tol_s: f64) -> PieceResult {
    let tp = match_boundaries(reference, estimate, tol_s).len();
    PieceResult {
        piece_id: piece_id.to_string(),
        version_id: version_id.to_string(),
        n_ref: reference.len(),
        n_est: estimate.len(),
        tp,
        scores: Prf::from_counts(tp, reference.len(), estimate.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tolerance_s: f64,
    pub pieces: Vec<PieceResult>,
    /// Unweighted mean over pieces; the headline number.
    pub macro_avg: Prf,
    /// Scores from pooled counts.
    pub micro_avg: Prf,
}

pub fn aggregate_report(pieces: Vec<PieceResult>, tol_s: f64) -> Result<EvalReport> {
    if pieces.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty evaluation".into()));
    }
    let n = pieces.len() as f64;
    let mean = |f: fn(&Prf) -> f64| pieces.iter().map(|p| f(&p.scores)).sum::<f64>() / n;
    let macro_avg = Prf {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f: mean(|s| s.f),
    };
    let (tp, n_ref, n_est) = pieces
        .iter()
        .fold((0, 0, 0), |(a, b, c), p| (a + p.tp, b + p.n_ref, c + p.n_est));
    Ok(EvalReport {
        tolerance_s: tol_s,
        micro_avg: Prf::from_counts(tp, n_ref, n_est),
        macro_avg,
        pieces,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Percentages with two decimals, one row per piece then the averages.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item\tHR3P\tHR3R\tHR3F\n");
        let mut row = |name: &str, s: &Prf| {
            out.push_str(&format!(
                "{name}\t{:.2}\t{:.2}\t{:.2}\n",
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f
            ))
        };
        for p in &self.pieces {
            row(&format!("{}/{}", p.piece_id, p.version_id), &p.scores);
        }
        row("macro", &self.macro_avg);
        row("micro", &self.micro_avg);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[f64]) -> BoundarySet {
        BoundarySet::from_unsorted(v.to_vec())
    }

    #[test]
    fn one_far_estimate() {
        let m = match_boundaries(&set(&[10.0, 60.0]), &set(&[11.5, 100.0]), 3.0);
        assert_eq!(m, vec![(0, 0)]);
        let s = hit_rate(&set(&[10.0, 60.0]), &set(&[11.5, 100.0]), 3.0);
        assert_eq!((s.precision, s.recall, s.f), (0.5, 0.5, 0.5));
    }

    #[test]
    fn one_to_one() {
        let s = hit_rate(&set(&[10.0, 12.0]), &set(&[11.0]), 3.0);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_sets() {
        let a = set(&[1.0, 5.0, 9.0]);
        assert_eq!(match_boundaries(&a, &a, 3.0).len(), 3);
        assert_eq!(hit_rate(&a, &a, 3.0).f, 1.0);
    }

    #[test]
    fn sweep_beats_nearest_pair_first() {
        // Pairing the closest pair first (3.1, 2.9) would strand both others.
        let m = match_boundaries(&set(&[0.0, 3.1]), &set(&[2.9, 6.0]), 3.0);
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn empty_conventions() {
        let e = BoundarySet::empty();
        assert_eq!(hit_rate(&e, &e, 3.0).f, 1.0);
        let s = hit_rate(&set(&[4.0]), &e, 3.0);
        assert_eq!((s.precision, s.recall, s.f), (0.0, 0.0, 0.0));
        let s = hit_rate(&e, &set(&[4.0]), 3.0);
        assert_eq!((s.precision, s.recall, s.f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn macro_and_micro() {
        let a = evaluate_piece("a", "v", &set(&[10.0]), &set(&[10.0]), 3.0);
        let b = evaluate_piece("b", "v", &set(&[10.0, 50.0, 90.0]), &set(&[10.0]), 3.0);
        assert_eq!(b.scores.f, 0.5);
        let report = aggregate_report(vec![a.clone(), b], 3.0).unwrap();
        assert_eq!(report.macro_avg.f, 0.75);
        assert_eq!(report.micro_avg.recall, 0.5);
        assert_ne!(report.macro_avg, report.micro_avg);
        let single = aggregate_report(vec![a.clone()], 3.0).unwrap();
        assert_eq!(single.macro_avg, a.scores);
        assert!(aggregate_report(vec![], 3.0).is_err());
    }

    #[test]
    fn tsv_layout() {
        let a = evaluate_piece("a", "v1", &set(&[10.0, 60.0]), &set(&[11.5, 100.0]), 3.0);
        let tsv = aggregate_report(vec![a], 3.0).unwrap().to_tsv();
        let lines: Vec<_> = tsv.lines().collect();
        assert_eq!(lines[0], "item\tHR3P\tHR3R\tHR3F");
        assert_eq!(lines[1], "a/v1\t50.00\t50.00\t50.00");
        assert_eq!(lines.len(), 4);
    }
}

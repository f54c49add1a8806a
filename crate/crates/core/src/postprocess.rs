//! Logits to boundary timestamps: sigmoid, local maxima, window filtering.

use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::annotations::BoundarySet;
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;

/// Settings substituted when the model runs without aggregation. `None`
/// window sizes default to `γ` spectrogram frames, about one second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoAggOverrides {
    pub threshold: f64,
    pub half_window: Option<usize>,
    pub min_gap: Option<usize>,
}

impl Default for NoAggOverrides {
    fn default() -> Self {
        NoAggOverrides {
            threshold: 0.8,
            half_window: None,
            min_gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostConfig {
    pub threshold: f64,
    /// Local-maximum half window, in output frames.
    pub half_window: usize,
    /// Minimum distance between kept peaks, in output frames.
    pub min_gap: usize,
    pub no_agg: NoAggOverrides,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            threshold: 0.5,
            half_window: 3,
            min_gap: 3,
            no_agg: NoAggOverrides::default(),
        }
    }
}

/// Resolved peak-picking parameters for one model configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakParams {
    pub threshold: f64,
    pub half_window: usize,
    pub min_gap: usize,
    /// Spectrogram frames per output frame.
    pub frames_per_step: usize,
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_theta = |t: f64| t > 0.0 && t < 1.0;
        if !ok_theta(self.threshold) || !ok_theta(self.no_agg.threshold) {
            return Err(Error::Config("post thresholds must lie in (0, 1)".into()));
        }
        if self.half_window == 0 || self.min_gap == 0 {
            return Err(Error::Config("post.half_window and post.min_gap must be ≥ 1".into()));
        }
        if self.no_agg.half_window == Some(0) || self.no_agg.min_gap == Some(0) {
            return Err(Error::Config("post.no_agg windows must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, model: &ModelConfig) -> PeakParams {
        if model.toggles.use_agg {
            PeakParams {
                threshold: self.threshold,
                half_window: self.half_window,
                min_gap: self.min_gap,
                frames_per_step: model.gamma,
            }
        } else {
            PeakParams {
                threshold: self.no_agg.threshold,
                half_window: self.no_agg.half_window.unwrap_or(model.gamma),
                min_gap: self.no_agg.min_gap.unwrap_or(model.gamma),
                frames_per_step: 1,
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn probabilities(logits: &Array1<f32>) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z as f64)).collect()
}

/// Indices above `threshold` that dominate their `±half_window` neighbourhood.
/// On a run of equal values only the leftmost index is reported.
pub fn pick_peaks(probs: &[f64], threshold: f64, half_window: usize) -> Vec<usize> {
    let n = probs.len();
    (0..n)
        .filter(|&i| {
            let p = probs[i];
            if p <= threshold || (i > 0 && probs[i - 1] == p) {
                return false;
            }
            let lo = i.saturating_sub(half_window);
            let hi = (i + half_window).min(n - 1);
            probs[lo..=hi].iter().all(|&q| p >= q)
        })
        .collect()
}

/// Greedy left-to-right suppression of peaks closer than `min_gap`; on conflict
/// the strictly higher peak replaces the previously kept one.
pub fn filter_windows(indices: &[usize], probs: &[f64], min_gap: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(indices.len());
    for &i in indices {
        match kept.last_mut() {
            Some(last) if i - *last < min_gap => {
                if probs[i] > probs[*last] {
                    *last = i;
                }
            }
            _ => kept.push(i),
        }
    }
    kept
}

/// Centre time of each output frame.
pub fn to_timestamps(indices: &[usize], frames_per_step: usize, dsp: &DspConfig) -> BoundarySet {
    let step = frames_per_step as f64 * dsp.frame_seconds();
    BoundarySet::from_unsorted(indices.iter().map(|&i| (i as f64 + 0.5) * step).collect())
}

/// Full chain from probabilities to boundary times.
pub fn boundaries_from_probs(probs: &[f64], params: &PeakParams, dsp: &DspConfig) -> BoundarySet {
    if probs.is_empty() {
        return BoundarySet::empty();
    }
    let peaks = pick_peaks(probs, params.threshold, params.half_window);
    let kept = filter_windows(&peaks, probs, params.min_gap);
    to_timestamps(&kept, params.frames_per_step, dsp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub piece_id: String,
    pub version_id: String,
    pub boundaries_s: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn key(&self) -> (String, String) {
        (self.piece_id.clone(), self.version_id.clone())
    }

    pub fn file_stem(&self) -> String {
        format!("{}__{}", self.piece_id, self.version_id)
    }
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let text = serde_json::to_string_pretty(predictions)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads either an array of predictions or a single prediction object.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

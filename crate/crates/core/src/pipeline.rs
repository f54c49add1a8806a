//! Loading pieces with cached features, batch inference and evaluation.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::annotations::{boundaries_of, BoundarySet, Level, Manifest, ManifestEntry};
use crate::dsp::{self, DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{self, ModelConfig, ModelParams};
use crate::postprocess::{self, PostConfig, Prediction};

/// Environment variable naming the feature cache directory.
pub const CACHE_ENV: &str = "SONALYZER_CACHE_DIR";

/// One recording ready for the network.
#[derive(Debug, Clone)]
pub struct PieceData {
    pub piece_id: String,
    pub version_id: String,
    pub duration_s: f64,
    /// `n_mels × l_f`, already log-compressed when the front end asks for it.
    pub mel: Array2<f32>,
    pub boundaries: BoundarySet,
}

/// Cache directory from [`CACHE_ENV`], if set and nonempty.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn cache_path(dir: &Path, audio: &Path, dsp: &DspConfig) -> PathBuf {
    let linear = DspConfig {
        log_compress: false,
        ..dsp.clone()
    };
    let mut h = Sha256::new();
    h.update(audio.to_string_lossy().as_bytes());
    h.update(serde_json::to_vec(&linear).expect("config serializes"));
    let hex: String = h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect();
    dir.join(format!("{hex}.mel"))
}

/// Linear mel features for `audio`: read directly from a `.mel` file, from the
/// cache, or computed (and cached when `cache` is given).
pub fn linear_mel(audio: &Path, dsp: &DspConfig, cache: Option<&Path>) -> Result<MelSpectrogram> {
    if audio.extension().is_some_and(|e| e == "mel") {
        return dsp::read_feature_cache(audio);
    }
    let cached = cache.map(|dir| cache_path(dir, audio, dsp));
    if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
        if let Ok(mel) = dsp::read_feature_cache(p) {
            return Ok(mel);
        }
        log::warn!("ignoring unreadable cache file {}", p.display());
    }
    let clip = dsp::load_audio(audio, dsp)?;
    let linear = DspConfig {
        log_compress: false,
        ..dsp.clone()
    };
    let mel = dsp::mel_spectrogram(&clip, &linear)?;
    if let Some(p) = cached {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        dsp::write_feature_cache(&p, &mel)?;
    }
    Ok(mel)
}

/// Features ready for the model: checks the band count and applies `ln(1 + M)` if configured.
pub fn model_input(mel: MelSpectrogram, dsp: &DspConfig, source: &Path) -> Result<Array2<f32>> {
    if mel.n_mels() != dsp.n_mels {
        return Err(Error::ConfigMismatch(format!(
            "{} has {} mel bands, configuration expects {}",
            source.display(),
            mel.n_mels(),
            dsp.n_mels
        )));
    }
    let mut data = mel.data;
    if dsp.log_compress {
        data.mapv_inplace(f32::ln_1p);
    }
    Ok(data)
}

pub fn load_piece(entry: &ManifestEntry, dsp: &DspConfig, cache: Option<&Path>) -> Result<PieceData> {
    let mel = model_input(linear_mel(&entry.audio, dsp, cache)?, dsp, &entry.audio)?;
    let r = &entry.record;
    Ok(PieceData {
        piece_id: r.piece_id.clone(),
        version_id: r.version_id.clone(),
        duration_s: r.duration_s,
        mel,
        boundaries: boundaries_of(r, Level::Structure)?,
    })
}

/// Loads all entries in parallel, preserving manifest order.
pub fn load_pieces(manifest: &Manifest, dsp: &DspConfig, cache: Option<&Path>) -> Result<Vec<PieceData>> {
    manifest.entries.par_iter().map(|e| load_piece(e, dsp, cache)).collect()
}

/// Boundary probabilities and timestamps for one feature matrix.
pub fn predict_mel(
    mel: &Array2<f32>,
    params: &ModelParams<f32>,
    model: &ModelConfig,
    post: &PostConfig,
    dsp: &DspConfig,
) -> Result<(Vec<f64>, BoundarySet)> {
    let logits = network::forward(mel.view(), params, model)?;
    let probs = postprocess::probabilities(&logits);
    let peak = post.resolve(model);
    let bounds = postprocess::boundaries_from_probs(&probs, &peak, dsp);
    Ok((probs, bounds))
}

pub fn predict_pieces(
    pieces: &[PieceData],
    params: &ModelParams<f32>,
    model: &ModelConfig,
    post: &PostConfig,
    dsp: &DspConfig,
) -> Result<Vec<Prediction>> {
    pieces
        .par_iter()
        .map(|p| {
            let (probs, bounds) = predict_mel(&p.mel, params, model, post, dsp)?;
            Ok(Prediction {
                piece_id: p.piece_id.clone(),
                version_id: p.version_id.clone(),
                boundaries_s: bounds.times().to_vec(),
                probs,
            })
        })
        .collect()
}

/// Scores predictions against the pieces' reference boundaries (same order).
pub fn evaluate_predictions(pieces: &[PieceData], predictions: &[Prediction], tol_s: f64) -> Result<EvalReport> {
    let rows = pieces
        .iter()
        .zip(predictions)
        .map(|(piece, pred)| {
            let est = BoundarySet::from_unsorted(pred.boundaries_s.clone());
            metrics::evaluate_piece(&piece.piece_id, &piece.version_id, &piece.boundaries, &est, tol_s)
        })
        .collect();
    metrics::aggregate_report(rows, tol_s)
}

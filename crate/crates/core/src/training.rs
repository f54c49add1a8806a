//! Targets, loss, optimizer and the training loop with early stopping.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::BoundarySet;
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_TOLERANCE_S;
use crate::network::{self, init_params, Checkpoint, ModelConfig, ModelParams};
use crate::pipeline::{self, PieceData};
use crate::postprocess::PostConfig;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation HR3F improvement before stopping.
    pub patience: usize,
    /// Fixed positive-class weight; per-piece `N_neg / N_pos` when unset.
    pub pos_weight: Option<f64>,
    pub pos_weight_min: f64,
    pub pos_weight_max: f64,
    /// Target value at the frames adjacent to a boundary.
    pub smear: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            learning_rate: 1e-4,
            max_epochs: 200,
            patience: 20,
            pos_weight: None,
            pos_weight_min: 1.0,
            pos_weight_max: 50.0,
            smear: 0.5,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and ≥ 0".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("train.max_epochs and train.patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smear) {
            return Err(Error::Config("train.smear must lie in [0, 1)".into()));
        }
        if !(self.pos_weight_min > 0.0 && self.pos_weight_min <= self.pos_weight_max) {
            return Err(Error::Config("train.pos_weight bounds must satisfy 0 < min ≤ max".into()));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.pos_weight and train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Frame targets: 1 at each boundary frame, `smear` on its neighbours.
pub fn frame_targets(boundaries: &BoundarySet, n: usize, frames_per_step: usize, dsp: &DspConfig, smear: f64) -> Array1<f64> {
    let mut t = Array1::zeros(n);
    if n == 0 {
        return t;
    }
    let step = frames_per_step as f64 * dsp.frame_seconds();
    let mut hits = Vec::with_capacity(boundaries.len());
    for &b in boundaries.times() {
        let raw = (b / step).floor();
        if raw < 0.0 || raw >= n as f64 {
            log::warn!("boundary at {b:.3} s lies outside {n} frames; clamped");
        }
        hits.push((raw.max(0.0) as usize).min(n - 1));
    }
    for &i in &hits {
        if i > 0 {
            t[i - 1] = f64::max(t[i - 1], smear);
        }
        if i + 1 < n {
            t[i + 1] = f64::max(t[i + 1], smear);
        }
    }
    for &i in &hits {
        t[i] = 1.0;
    }
    t
}

/// `N_neg / N_pos` over hard positives, clamped.
pub fn auto_pos_weight(targets: &Array1<f64>, min: f64, max: f64) -> f64 {
    let pos = targets.iter().filter(|&&v| v == 1.0).count();
    if pos == 0 {
        return min;
    }
    ((targets.len() - pos) as f64 / pos as f64).clamp(min, max)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean weighted binary cross-entropy on logits.
pub fn bce_loss<T: Scalar>(logits: &Array1<T>, targets: &Array1<f64>, pos_weight: f64) -> f64 {
    assert_eq!(logits.len(), targets.len(), "logit/target length mismatch");
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let z = z.to_f64c();
            pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z)
        })
        .sum();
    sum / logits.len() as f64
}

/// `∂ bce_loss / ∂ logits`.
pub fn bce_loss_grad<T: Scalar>(logits: &Array1<T>, targets: &Array1<f64>, pos_weight: f64) -> Array1<T> {
    let n = logits.len() as f64;
    Array1::from_iter(logits.iter().zip(targets).map(|(&z, &t)| {
        let s = crate::postprocess::sigmoid(z.to_f64c());
        T::from_f64c((pos_weight * t * (s - 1.0) + (1.0 - t) * s) / n)
    }))
}

/// Adaptive-moment optimizer with the usual moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams<f32>,
    v: ModelParams<f32>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grad: &mut ModelParams<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors_mut())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Loss and gradient for one piece.
pub fn piece_gradient(
    piece: &PieceData,
    params: &ModelParams<f32>,
    model: &ModelConfig,
    dsp: &DspConfig,
    train: &TrainConfig,
) -> Result<(f64, ModelParams<f32>)> {
    let (logits, tape) = network::forward_tape(piece.mel.view(), params, model)?;
    let targets = frame_targets(&piece.boundaries, logits.len(), model.effective_gamma(), dsp, train.smear);
    let w = train
        .pos_weight
        .unwrap_or_else(|| auto_pos_weight(&targets, train.pos_weight_min, train.pos_weight_max));
    let loss = bce_loss(&logits, &targets, w);
    let grad = network::backward(params, model, &tape, &bce_loss_grad(&logits, &targets, w));
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_p: f64,
    pub val_r: f64,
    pub val_f: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tval_HR3P\tval_HR3R\tval_HR3F\tseconds";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
            self.epoch, self.train_loss, self.val_p, self.val_r, self.val_f, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Whether the loop ended on the patience criterion.
    pub early_stopped: bool,
}

/// Everything the loop needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub post: &'a PostConfig,
    pub dsp: &'a DspConfig,
    /// Start from these parameters instead of a fresh initialization.
    pub resume: Option<&'a Checkpoint>,
}

/// Hard failure if any piece id is shared between the two sets.
pub fn check_no_leakage(train: &[PieceData], val: &[PieceData]) -> Result<()> {
    let ids: BTreeSet<&str> = train.iter().map(|p| p.piece_id.as_str()).collect();
    if let Some(p) = val.iter().find(|p| ids.contains(p.piece_id.as_str())) {
        return Err(Error::Leakage(format!(
            "piece {} appears in both training and held-out data",
            p.piece_id
        )));
    }
    Ok(())
}

/// Trains on `train_set`, selecting the epoch with the best validation HR3F.
/// `on_epoch` sees every log row as soon as it is available.
pub fn train(
    train_set: &[PieceData],
    val_set: &[PieceData],
    setup: &TrainSetup<'_>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let TrainSetup {
        model,
        train: cfg,
        post,
        dsp,
        resume,
    } = *setup;
    model.validate()?;
    cfg.validate()?;
    post.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be nonempty".into()));
    }
    check_no_leakage(train_set, val_set)?;
    for p in train_set.iter().chain(val_set) {
        if p.mel.nrows() != model.n_mels || p.mel.ncols() < model.effective_gamma() {
            return Err(Error::InvalidInput(format!(
                "{}/{}: features {:?} unusable for this model",
                p.piece_id,
                p.version_id,
                p.mel.dim()
            )));
        }
    }

    let mut params = match resume {
        Some(ck) => {
            ck.check_compatible(model, dsp)?;
            ck.params.clone()
        }
        None => init_params::<f32>(model, cfg.seed),
    };
    let start_epoch = resume.map_or(0, |ck| ck.epoch);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let snapshot = |params: &ModelParams<f32>, epoch: usize, f: f64| Checkpoint {
        params: params.clone(),
        model: model.clone(),
        dsp: dsp.clone(),
        post: post.clone(),
        seed: cfg.seed,
        epoch,
        best_val_hr3f: f,
    };
    let mut best = match resume {
        Some(ck) => ck.clone(),
        None => snapshot(&params, 0, f64::NEG_INFINITY),
    };
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut early_stopped = false;

    for epoch in start_epoch + 1..=start_epoch + cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let piece = &train_set[k];
            let diverged = |detail: String| Error::Divergence {
                epoch,
                piece: format!("{}/{}", piece.piece_id, piece.version_id),
                detail,
            };
            let (loss, mut grad) = piece_gradient(piece, &params, model, dsp, cfg)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            grad.check_finite().map_err(|e| diverged(e.to_string()))?;
            if let Some(max_norm) = cfg.clip_norm {
                let norm = grad.global_norm();
                if norm > max_norm {
                    let s = (max_norm / norm) as f32;
                    grad.visit_mut(|_, t| t.iter_mut().for_each(|v| *v *= s));
                }
            }
            adam.update(&mut params, &mut grad);
            total += loss;
        }
        params
            .check_finite()
            .map_err(|e| Error::Divergence {
                epoch,
                piece: "(after update)".into(),
                detail: e.to_string(),
            })?;

        let preds = pipeline::predict_pieces(val_set, &params, model, post, dsp)?;
        let report = pipeline::evaluate_predictions(val_set, &preds, DEFAULT_TOLERANCE_S)?;
        let row = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_p: report.macro_avg.precision,
            val_r: report.macro_avg.recall,
            val_f: report.macro_avg.f,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.tsv_row());
        on_epoch(&row);
        log.push(row);

        let f = report.macro_avg.f;
        if f > best.best_val_hr3f {
            best = snapshot(&params, epoch, f);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }
    if !best.best_val_hr3f.is_finite() {
        best.best_val_hr3f = 0.0;
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        early_stopped,
    })
}

/// One cell of a hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub channels: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub channels: Vec<usize>,
    pub lstm_hidden: Vec<usize>,
    pub lstm_layers: Vec<usize>,
}

impl GridSpec {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &channels in &self.channels {
            for &lstm_hidden in &self.lstm_hidden {
                for &lstm_layers in &self.lstm_layers {
                    out.push(GridCell {
                        channels,
                        lstm_hidden,
                        lstm_layers,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub cell: GridCell,
    /// Validation scores of the selected epoch; `None` when the cell failed.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f: Option<f64>,
    pub error: Option<String>,
}

/// Trains every cell and ranks them by validation HR3F (failed cells last).
pub fn grid_search(grid: &GridSpec, train_set: &[PieceData], val_set: &[PieceData], setup: &TrainSetup<'_>) -> Result<Vec<GridRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid search needs at least one value per axis".into()));
    }
    let mut rows: Vec<GridRow> = cells
        .into_iter()
        .map(|cell| {
            let model = ModelConfig {
                channels: cell.channels,
                lstm_hidden: cell.lstm_hidden,
                lstm_layers: cell.lstm_layers,
                ..setup.model.clone()
            };
            let cell_setup = TrainSetup {
                model: &model,
                resume: None,
                ..setup.clone()
            };
            match train(train_set, val_set, &cell_setup, |_| {}) {
                Ok(out) => {
                    let best = out.log.iter().find(|r| r.epoch == out.checkpoint.epoch);
                    GridRow {
                        cell,
                        precision: best.map(|r| r.val_p),
                        recall: best.map(|r| r.val_r),
                        f: Some(out.checkpoint.best_val_hr3f),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("grid cell {cell:?} failed: {e}");
                    GridRow {
                        cell,
                        precision: None,
                        recall: None,
                        f: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &GridRow| r.f.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    Ok(rows)
}

pub fn grid_tsv(rows: &[GridRow]) -> String {
    let mut out = String::from("(C, h_lstm, L_lstm)\tHR3P\tHR3R\tHR3F\n");
    for r in rows {
        let pct = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{:.2}", 100.0 * v));
        out.push_str(&format!(
            "({}, {}, {})\t{}\t{}\t{}\n",
            r.cell.channels,
            r.cell.lstm_hidden,
            r.cell.lstm_layers,
            pct(r.precision),
            pct(r.recall),
            pct(r.f)
        ));
    }
    out
}

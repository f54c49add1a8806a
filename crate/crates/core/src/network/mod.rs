//! Boundary model: 3-layer convolutional embedding, feature aggregation and
//! augmentation, an LSTM stack and a two-layer MLP head producing one logit per
//! aggregated frame.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Augment;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, compare_gradients, GradCheckReport};
pub use model::{backward, embed, forward, forward_tape, ForwardTape};
pub use params::{init_params, ModelParams};

/// Stage switches used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub use_agg: bool,
    pub use_pe: bool,
    pub use_dssm_sum: bool,
    pub use_dssm_mean: bool,
    pub use_lstm: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_agg: true,
            use_pe: true,
            use_dssm_sum: true,
            use_dssm_mean: true,
            use_lstm: true,
        }
    }
}

impl Toggles {
    pub fn augment(&self) -> Augment {
        Augment {
            pe: self.use_pe,
            dssm_sum: self.use_dssm_sum,
            dssm_mean: self.use_dssm_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding channels `C`.
    pub channels: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Frames per aggregation window.
    pub gamma: usize,
    pub n_mels: usize,
    /// Hidden width of the MLP head; `lstm_hidden / 4` when unset.
    pub mlp_hidden: Option<usize>,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 10,
            lstm_hidden: 1024,
            lstm_layers: 5,
            gamma: 43,
            n_mels: 128,
            mlp_hidden: None,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 || self.gamma == 0 {
            return Err(Error::Config(
                "model.channels, lstm_hidden, lstm_layers and gamma must be positive".into(),
            ));
        }
        if self.n_mels < 4 || !self.n_mels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "model.n_mels must be a positive multiple of 4 (two 2x pooling stages), got {}",
                self.n_mels
            )));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::Config("model.mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or((self.lstm_hidden / 4).max(1))
    }

    /// Spectrogram frames per model output step (1 when aggregation is off).
    pub fn effective_gamma(&self) -> usize {
        if self.toggles.use_agg {
            self.gamma
        } else {
            1
        }
    }

    /// Width of `σ′`, the input of the sequence model.
    pub fn feature_width(&self) -> usize {
        self.toggles.augment().width(self.effective_gamma() * self.channels)
    }

    /// Number of logits for `l_f` spectrogram frames.
    pub fn output_len(&self, l_f: usize) -> usize {
        l_f / self.effective_gamma()
    }
}

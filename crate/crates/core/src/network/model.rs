use ndarray::{Array1, Array2, Array3, ArrayView2};

use super::layers::{self, LstmTape};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::features::{self, DssmStatsTape};
use crate::scalar::Scalar;

struct ConvStage<T> {
    cols: Array2<T>,
    activated: Array3<T>,
    /// Winner mask of the following max pool (absent for the last stage).
    pool_upper: Option<Array3<bool>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTape<T> {
    l_f: usize,
    n_mels: usize,
    conv: Vec<ConvStage<T>>,
    sigma: Array2<T>,
    stats: Option<DssmStatsTape<T>>,
    lstm_inputs: Vec<Array2<T>>,
    lstm_tapes: Vec<LstmTape<T>>,
    head_input: Array2<T>,
    head_hidden: Array2<T>,
}

impl<T> ForwardTape<T> {
    /// Output of the embedding stage is `l_f × C`.
    pub fn n_frames(&self) -> usize {
        self.l_f
    }
}

/// Embedding: three conv+ReLU stages (max-pool, max-pool, mean over frequency).
pub fn embed<T: Scalar>(mel: ArrayView2<T>, params: &ModelParams<T>) -> Array2<T> {
    embed_tape(mel, params).0
}

fn embed_tape<T: Scalar>(mel: ArrayView2<T>, params: &ModelParams<T>) -> (Array2<T>, Vec<ConvStage<T>>) {
    let (n_mels, l_f) = mel.dim();
    let mut x = mel
        .to_owned()
        .into_shape_with_order((1, n_mels, l_f))
        .expect("mel is 2-D");
    let mut stages = Vec::with_capacity(3);
    let last = params.conv.len() - 1;
    for (k, conv) in params.conv.iter().enumerate() {
        let (mut y, cols) = conv.forward(x.view());
        layers::relu_inplace(&mut y);
        if k < last {
            let (pooled, upper) = layers::max_pool_freq(&y);
            stages.push(ConvStage {
                cols,
                activated: y,
                pool_upper: Some(upper),
            });
            x = pooled;
        } else {
            let out = layers::avg_pool_freq(&y);
            stages.push(ConvStage {
                cols,
                activated: y,
                pool_upper: None,
            });
            return (out, stages);
        }
    }
    unreachable!("model has at least one conv stage")
}

/// Logits for one piece.
pub fn forward<T: Scalar>(mel: ArrayView2<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Array1<T>> {
    forward_tape(mel, params, config).map(|(z, _)| z)
}

/// Forward pass that also records the activations needed by [`backward`].
pub fn forward_tape<T: Scalar>(
    mel: ArrayView2<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Array1<T>, ForwardTape<T>)> {
    let (n_mels, l_f) = mel.dim();
    if n_mels != config.n_mels {
        return Err(Error::InvalidInput(format!(
            "expected {} mel bands, got {n_mels}",
            config.n_mels
        )));
    }
    let gamma = config.effective_gamma();
    if l_f < gamma || l_f == 0 {
        return Err(Error::InvalidInput(format!(
            "{l_f} frames is shorter than one aggregation window ({gamma})"
        )));
    }
    let (embedded, conv) = embed_tape(mel, params);
    let sigma = features::aggregate(embedded.view(), gamma)?;
    let n = sigma.nrows();
    let augment = config.toggles.augment();
    let pe = features::single_cycle_pe::<T>(n);
    let (stats, stats_tape) = if augment.dssm_sum || augment.dssm_mean {
        let (s, t) = features::dssm_stats_forward(sigma.view());
        (s, Some(t))
    } else {
        (Array2::zeros((n, 2)), None)
    };
    let augmented = features::concat_features(sigma.view(), pe.view(), stats.view(), augment)?;

    let mut lstm_inputs = Vec::with_capacity(params.lstm.len());
    let mut lstm_tapes = Vec::with_capacity(params.lstm.len());
    let mut x = augmented;
    for lstm in &params.lstm {
        let (h, tape) = lstm.forward(x.view());
        lstm_inputs.push(x);
        lstm_tapes.push(tape);
        x = h;
    }
    let head_input = x;
    let mut hidden = params.head[0].forward(head_input.view());
    hidden.mapv_inplace(|v| v.max(T::zero()));
    let out = params.head[1].forward(hidden.view());
    let logits = out.column(0).to_owned();
    Ok((
        logits,
        ForwardTape {
            l_f,
            n_mels,
            conv,
            sigma,
            stats: stats_tape,
            lstm_inputs,
            lstm_tapes,
            head_input,
            head_hidden: hidden,
        },
    ))
}

/// Parameter gradients of a scalar loss given `∂loss/∂logits`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tape: &ForwardTape<T>,
    d_logits: &Array1<T>,
) -> ModelParams<T> {
    let mut grad = ModelParams::<T>::zeros(config);
    let n = d_logits.len();
    let d_out = d_logits.view().into_shape_with_order((n, 1)).expect("column");
    let mut d_hidden = params.head[1].backward(tape.head_hidden.view(), d_out, &mut grad.head[1]);
    ndarray::Zip::from(&mut d_hidden)
        .and(&tape.head_hidden)
        .for_each(|g, &h| {
            if h <= T::zero() {
                *g = T::zero();
            }
        });
    let mut d_x = params.head[0].backward(tape.head_input.view(), d_hidden.view(), &mut grad.head[0]);
    for k in (0..params.lstm.len()).rev() {
        d_x = params.lstm[k].backward(
            tape.lstm_inputs[k].view(),
            &tape.lstm_tapes[k],
            d_x.view(),
            &mut grad.lstm[k],
        );
    }
    let augment = config.toggles.augment();
    let base = tape.sigma.ncols();
    let (mut d_sigma, d_stats) = features::split_augmented_grad(d_x.view(), base, augment);
    if let Some(stats) = &tape.stats {
        d_sigma = d_sigma + stats.backward(d_stats.view());
    }
    let d_embedded = features::disaggregate(d_sigma.view(), tape.l_f, config.channels);

    let mut h = tape.n_mels >> (tape.conv.len() - 1);
    let mut d_act = layers::avg_pool_freq_backward(d_embedded.view(), h);
    for k in (0..tape.conv.len()).rev() {
        let stage = &tape.conv[k];
        layers::relu_backward(&mut d_act, &stage.activated);
        let d_in = params.conv[k].backward(d_act.view(), &stage.cols, &mut grad.conv[k], k > 0);
        if let Some(d_in) = d_in {
            h *= 2;
            let upper = tape.conv[k - 1].pool_upper.as_ref().expect("pooled stage");
            d_act = layers::max_pool_freq_backward(&d_in, upper, h);
        }
    }
    grad
}

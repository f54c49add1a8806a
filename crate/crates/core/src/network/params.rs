use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv3x3, Dense, Lstm};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// All trainable tensors. Shapes are a pure function of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub conv: Vec<Conv3x3<T>>,
    pub lstm: Vec<Lstm<T>>,
    pub head: Vec<Dense<T>>,
}

fn dense<T: Scalar>(out: usize, inp: usize) -> Dense<T> {
    Dense {
        weight: Array2::zeros((out, inp)),
        bias: Array1::zeros(out),
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels;
        let conv = [(1, c), (c, c), (c, c)]
            .into_iter()
            .map(|(cin, cout)| Conv3x3 {
                weight: Array2::zeros((cout, cin * 9)),
                bias: Array1::zeros(cout),
            })
            .collect();
        let h = config.lstm_hidden;
        let mut lstm = Vec::new();
        let mut head_in = config.feature_width();
        if config.toggles.use_lstm {
            for layer in 0..config.lstm_layers {
                let inp = if layer == 0 { config.feature_width() } else { h };
                lstm.push(Lstm {
                    w_ih: Array2::zeros((4 * h, inp)),
                    w_hh: Array2::zeros((4 * h, h)),
                    bias: Array1::zeros(4 * h),
                });
            }
            head_in = h;
        }
        let mid = config.mlp_hidden();
        ModelParams {
            conv,
            lstm,
            head: vec![dense(mid, head_in), dense(1, mid)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, t| t.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Visits every tensor in a fixed order with its name and shape.
    pub fn visit<F: FnMut(&str, &[usize], &[T])>(&self, mut f: F) {
        for (k, c) in self.conv.iter().enumerate() {
            f(&format!("embed.conv{}.weight", k + 1), c.weight.shape(), c.weight.as_slice().unwrap());
            f(&format!("embed.conv{}.bias", k + 1), c.bias.shape(), c.bias.as_slice().unwrap());
        }
        for (k, l) in self.lstm.iter().enumerate() {
            f(&format!("lstm.{k}.w_ih"), l.w_ih.shape(), l.w_ih.as_slice().unwrap());
            f(&format!("lstm.{k}.w_hh"), l.w_hh.shape(), l.w_hh.as_slice().unwrap());
            f(&format!("lstm.{k}.bias"), l.bias.shape(), l.bias.as_slice().unwrap());
        }
        for (k, d) in self.head.iter().enumerate() {
            f(&format!("head.fc{}.weight", k + 1), d.weight.shape(), d.weight.as_slice().unwrap());
            f(&format!("head.fc{}.bias", k + 1), d.bias.shape(), d.bias.as_slice().unwrap());
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut [T])>(&mut self, mut f: F) {
        for (k, c) in self.conv.iter_mut().enumerate() {
            f(&format!("embed.conv{}.weight", k + 1), c.weight.as_slice_mut().unwrap());
            f(&format!("embed.conv{}.bias", k + 1), c.bias.as_slice_mut().unwrap());
        }
        for (k, l) in self.lstm.iter_mut().enumerate() {
            f(&format!("lstm.{k}.w_ih"), l.w_ih.as_slice_mut().unwrap());
            f(&format!("lstm.{k}.w_hh"), l.w_hh.as_slice_mut().unwrap());
            f(&format!("lstm.{k}.bias"), l.bias.as_slice_mut().unwrap());
        }
        for (k, d) in self.head.iter_mut().enumerate() {
            f(&format!("head.fc{}.weight", k + 1), d.weight.as_slice_mut().unwrap());
            f(&format!("head.fc{}.bias", k + 1), d.bias.as_slice_mut().unwrap());
        }
    }

    /// Flat mutable views of all tensors, in [`visit`](Self::visit) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in self.conv.iter_mut() {
            out.push(c.weight.as_slice_mut().unwrap());
            out.push(c.bias.as_slice_mut().unwrap());
        }
        for l in self.lstm.iter_mut() {
            out.push(l.w_ih.as_slice_mut().unwrap());
            out.push(l.w_hh.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        for d in self.head.iter_mut() {
            out.push(d.weight.as_slice_mut().unwrap());
            out.push(d.bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _, _| names.push(n.to_string()));
        names
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, t| n += t.len());
        n
    }

    /// Errors with the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit(|name, _, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::NonFiniteGradient(name)),
            None => Ok(()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(|_, _, t| acc += t.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>());
        acc.sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = self
            .conv
            .iter()
            .map(|c| Conv3x3 {
                weight: c.weight.mapv(|v| U::from_f64c(v.to_f64c())),
                bias: c.bias.mapv(|v| U::from_f64c(v.to_f64c())),
            })
            .collect();
        let lstm = self
            .lstm
            .iter()
            .map(|l| Lstm {
                w_ih: l.w_ih.mapv(|v| U::from_f64c(v.to_f64c())),
                w_hh: l.w_hh.mapv(|v| U::from_f64c(v.to_f64c())),
                bias: l.bias.mapv(|v| U::from_f64c(v.to_f64c())),
            })
            .collect();
        let head = self
            .head
            .iter()
            .map(|d| Dense {
                weight: d.weight.mapv(|v| U::from_f64c(v.to_f64c())),
                bias: d.bias.mapv(|v| U::from_f64c(v.to_f64c())),
            })
            .collect();
        ModelParams { conv, lstm, head }
    }
}

/// Deterministic uniform fan-in scaled initialization; LSTM forget-gate bias 1.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut params = ModelParams::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = |t: &mut [T], bound: f64, rng: &mut ChaCha8Rng| {
        for v in t.iter_mut() {
            *v = T::from_f64c(rng.random_range(-bound..bound));
        }
    };
    for c in params.conv.iter_mut() {
        // He-uniform: the convolutions feed ReLUs
        let fan_in = c.weight.ncols() as f64;
        fill(c.weight.as_slice_mut().unwrap(), (6.0 / fan_in).sqrt(), &mut rng);
        fill(c.bias.as_slice_mut().unwrap(), 1.0 / fan_in.sqrt(), &mut rng);
    }
    for l in params.lstm.iter_mut() {
        let (h, inp) = (l.w_hh.ncols(), l.w_ih.ncols());
        fill(l.w_ih.as_slice_mut().unwrap(), 1.0 / (inp as f64).sqrt(), &mut rng);
        fill(l.w_hh.as_slice_mut().unwrap(), 1.0 / (h as f64).sqrt(), &mut rng);
        fill(l.bias.as_slice_mut().unwrap(), 1.0 / (h as f64).sqrt(), &mut rng);
        for k in h..2 * h {
            l.bias[k] = T::one();
        }
    }
    let n_head = params.head.len();
    for (k, d) in params.head.iter_mut().enumerate() {
        let fan_in = d.weight.ncols() as f64;
        let bound = if k + 1 < n_head { (6.0 / fan_in).sqrt() } else { 1.0 / fan_in.sqrt() };
        fill(d.weight.as_slice_mut().unwrap(), bound, &mut rng);
        fill(d.bias.as_slice_mut().unwrap(), 1.0 / fan_in.sqrt(), &mut rng);
    }
    params
}

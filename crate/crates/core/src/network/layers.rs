//! Layer primitives with explicit backward passes.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::scalar::Scalar;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// 3×3 same-padded convolution over `(channels, freq, time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    /// `(out, in · 9)`, kernel index `ci·9 + kh·3 + kw`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Unfolded 3×3 neighbourhoods: `(in·9, freq·time)`.
pub(crate) fn im2col<T: Scalar>(x: ArrayView3<T>) -> Array2<T> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((cin * 9, h * w));
    for ci in 0..cin {
        for kh in 0..3 {
            for kw in 0..3 {
                let mut row = cols.row_mut(ci * 9 + kh * 3 + kw);
                let row = row.as_slice_mut().expect("contiguous");
                for y in 0..h {
                    let sy = y as isize + kh as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, sy as usize, ..]);
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kw {
                        0 => {
                            for t in 1..w {
                                dst[t] = src[t - 1];
                            }
                        }
                        1 => {
                            for t in 0..w {
                                dst[t] = src[t];
                            }
                        }
                        _ => {
                            for t in 0..w.saturating_sub(1) {
                                dst[t] = src[t + 1];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Scalar>(cols: ArrayView2<T>, cin: usize, h: usize, w: usize) -> Array3<T> {
    let mut x = Array3::<T>::zeros((cin, h, w));
    for ci in 0..cin {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = cols.row(ci * 9 + kh * 3 + kw);
                for y in 0..h {
                    let sy = y as isize + kh as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = x.slice_mut(s![ci, sy as usize, ..]);
                    let src = row.slice(s![y * w..(y + 1) * w]);
                    match kw {
                        0 => {
                            for t in 1..w {
                                dst[t - 1] = dst[t - 1] + src[t];
                            }
                        }
                        1 => {
                            for t in 0..w {
                                dst[t] = dst[t] + src[t];
                            }
                        }
                        _ => {
                            for t in 0..w.saturating_sub(1) {
                                dst[t + 1] = dst[t + 1] + src[t];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Conv3x3<T> {
    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the pre-activation output and the unfolded input kept for backward.
    pub fn forward(&self, x: ArrayView3<T>) -> (Array3<T>, Array2<T>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when requested.
    pub fn backward(
        &self,
        d_out: ArrayView3<T>,
        cols: &Array2<T>,
        grad: &mut Conv3x3<T>,
        need_input: bool,
    ) -> Option<Array3<T>> {
        let (cout, h, w) = d_out.dim();
        let d2 = d_out
            .to_shape((cout, h * w))
            .expect("contiguous gradient");
        grad.weight = &grad.weight + &d2.dot(&cols.t());
        grad.bias = &grad.bias + &d2.sum_axis(Axis(1));
        if need_input {
            let dcols = self.weight.t().dot(&d2);
            Some(col2im(dcols.view(), self.in_channels(), h, w))
        } else {
            None
        }
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Zeroes gradient entries whose forward activation was not positive.
pub(crate) fn relu_backward<T: Scalar>(d: &mut Array3<T>, activated: &Array3<T>) {
    ndarray::Zip::from(d).and(activated).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

/// 2×1 max pooling along frequency. Returns the pooled map and, per output,
/// whether the upper row of the pair won.
pub(crate) fn max_pool_freq<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Array3<bool>) {
    let (c, h, w) = x.dim();
    let mut out = Array3::<T>::zeros((c, h / 2, w));
    let mut upper = Array3::<bool>::from_elem((c, h / 2, w), false);
    for ci in 0..c {
        for y in 0..h / 2 {
            for t in 0..w {
                let (a, b) = (x[[ci, 2 * y, t]], x[[ci, 2 * y + 1, t]]);
                if b > a {
                    out[[ci, y, t]] = b;
                    upper[[ci, y, t]] = true;
                } else {
                    out[[ci, y, t]] = a;
                }
            }
        }
    }
    (out, upper)
}

pub(crate) fn max_pool_freq_backward<T: Scalar>(d: &Array3<T>, upper: &Array3<bool>, h: usize) -> Array3<T> {
    let (c, hp, w) = d.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..hp {
            for t in 0..w {
                let row = if upper[[ci, y, t]] { 2 * y + 1 } else { 2 * y };
                out[[ci, row, t]] = d[[ci, y, t]];
            }
        }
    }
    out
}

/// Mean over the frequency axis: `(c, h, w)` → `(w, c)`.
pub(crate) fn avg_pool_freq<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let h = T::from_usize(x.dim().1).unwrap();
    x.sum_axis(Axis(1)).mapv(|v| v / h).reversed_axes().as_standard_layout().to_owned()
}

pub(crate) fn avg_pool_freq_backward<T: Scalar>(d: ArrayView2<T>, h: usize) -> Array3<T> {
    let (w, c) = d.dim();
    let hf = T::from_usize(h).unwrap();
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for t in 0..w {
                out[[ci, y, t]] = d[[t, ci]] / hf;
            }
        }
    }
    out
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `(out, in)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<T>, d_out: ArrayView2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.weight = &grad.weight + &d_out.t().dot(&x);
        grad.bias = &grad.bias + &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight)
    }
}

/// Unidirectional LSTM layer with gate order (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    /// `(4h, in)`
    pub w_ih: Array2<T>,
    /// `(4h, h)`
    pub w_hh: Array2<T>,
    /// `(4h)`
    pub bias: Array1<T>,
}

/// Activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmTape<T> {
    /// Post-nonlinearity gates `(n, 4h)`.
    gates: Array2<T>,
    cells: Array2<T>,
    hidden: Array2<T>,
    tanh_cells: Array2<T>,
}

impl<T: Scalar> Lstm<T> {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LstmTape<T>) {
        let n = x.nrows();
        let hs = self.hidden_size();
        let mut gates = x.dot(&self.w_ih.t()) + &self.bias;
        let mut cells = Array2::<T>::zeros((n, hs));
        let mut hidden = Array2::<T>::zeros((n, hs));
        let mut tanh_cells = Array2::<T>::zeros((n, hs));
        let mut h_prev = Array1::<T>::zeros(hs);
        let mut c_prev = Array1::<T>::zeros(hs);
        for t in 0..n {
            let recur = self.w_hh.dot(&h_prev);
            let mut g = gates.row_mut(t);
            g.zip_mut_with(&recur, |a, &b| *a = *a + b);
            for k in 0..hs {
                g[k] = sigmoid(g[k]);
                g[hs + k] = sigmoid(g[hs + k]);
                g[2 * hs + k] = g[2 * hs + k].tanh();
                g[3 * hs + k] = sigmoid(g[3 * hs + k]);
                let c = g[hs + k] * c_prev[k] + g[k] * g[2 * hs + k];
                let tc = c.tanh();
                cells[[t, k]] = c;
                tanh_cells[[t, k]] = tc;
                hidden[[t, k]] = g[3 * hs + k] * tc;
            }
            h_prev.assign(&hidden.row(t));
            c_prev.assign(&cells.row(t));
        }
        let out = hidden.clone();
        (
            out,
            LstmTape {
                gates,
                cells,
                hidden,
                tanh_cells,
            },
        )
    }

    pub fn backward(&self, x: ArrayView2<T>, tape: &LstmTape<T>, d_hidden: ArrayView2<T>, grad: &mut Lstm<T>) -> Array2<T> {
        let n = x.nrows();
        let hs = self.hidden_size();
        let one = T::one();
        let mut d_pre = Array2::<T>::zeros((n, 4 * hs));
        let mut dh_next = Array1::<T>::zeros(hs);
        let mut dc_next = Array1::<T>::zeros(hs);
        for t in (0..n).rev() {
            let g = tape.gates.row(t);
            let mut dp = d_pre.row_mut(t);
            for k in 0..hs {
                let (i, f, gg, o) = (g[k], g[hs + k], g[2 * hs + k], g[3 * hs + k]);
                let tc = tape.tanh_cells[[t, k]];
                let c_prev = if t > 0 { tape.cells[[t - 1, k]] } else { T::zero() };
                let dh = d_hidden[[t, k]] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (one - tc * tc) + dc_next[k];
                dp[k] = dc * gg * i * (one - i);
                dp[hs + k] = dc * c_prev * f * (one - f);
                dp[2 * hs + k] = dc * i * (one - gg * gg);
                dp[3 * hs + k] = d_o * o * (one - o);
                dc_next[k] = dc * f;
            }
            dh_next = self.w_hh.t().dot(&dp);
        }
        grad.w_ih = &grad.w_ih + &d_pre.t().dot(&x);
        if n > 1 {
            let dw_hh = d_pre.slice(s![1.., ..]).t().dot(&tape.hidden.slice(s![..n - 1, ..]));
            grad.w_hh = &grad.w_hh + &dw_hh;
        }
        grad.bias = &grad.bias + &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w_ih)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric<F: Fn(f64) -> f64>(f: F) -> f64 {
        let h = 1e-6;
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, t)| (c * 20 + y * 5 + t) as f64 * 0.1 - 1.0);
        let cols = im2col(x.view());
        let r = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 31 + j * 17) % 13) as f64 - 6.0);
        let lhs = (&cols * &r).sum();
        let back = col2im(r.view(), 2, 4, 5);
        let rhs = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn conv_center_tap_is_identity() {
        let mut weight = Array2::<f64>::zeros((1, 9));
        weight[[0, 4]] = 1.0;
        let conv = Conv3x3 {
            weight,
            bias: array![0.0],
        };
        let x = Array3::from_shape_fn((1, 3, 4), |(_, y, t)| (y * 4 + t) as f64);
        let (y, _) = conv.forward(x.view());
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shift_tap() {
        // kw = 0 reads the previous time step
        let mut weight = Array2::<f64>::zeros((1, 9));
        weight[[0, 3]] = 1.0;
        let conv = Conv3x3 {
            weight,
            bias: array![0.5],
        };
        let x = array![[[1.0, 2.0, 3.0]]];
        let (y, _) = conv.forward(x.view());
        assert_eq!(y, array![[[0.5, 1.5, 2.5]]]);
    }

    #[test]
    fn dense_linear_case_is_exact() {
        let layer = Dense {
            weight: array![[0.3, -0.2, 0.1], [0.05, 0.4, -0.6]],
            bias: array![0.1, -0.3],
        };
        let x = array![[1.0, 2.0, -1.0], [0.5, -0.5, 0.25]];
        let upstream = array![[1.0, -2.0], [0.5, 3.0]];
        let mut grad = Dense {
            weight: Array2::zeros((2, 3)),
            bias: Array1::zeros(2),
        };
        layer.backward(x.view(), upstream.view(), &mut grad);
        for i in 0..2 {
            for j in 0..3 {
                // central differences are exact for a linear map, so a unit step avoids cancellation
                let f = |h: f64| {
                    let mut l = layer.clone();
                    l.weight[[i, j]] += h;
                    (l.forward(x.view()) * &upstream).sum()
                };
                let n = (f(1.0) - f(-1.0)) / 2.0;
                assert!((n - grad.weight[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let (inp, hs, n) = (3, 4, 5);
        let f = |i: usize, j: usize, k: usize| ((i * 7 + j * 13 + k * 3) % 17) as f64 / 17.0 - 0.5;
        let lstm = Lstm {
            w_ih: Array2::from_shape_fn((4 * hs, inp), |(i, j)| f(i, j, 1)),
            w_hh: Array2::from_shape_fn((4 * hs, hs), |(i, j)| f(i, j, 2)),
            bias: Array1::from_shape_fn(4 * hs, |i| f(i, 0, 3)),
        };
        let x = Array2::from_shape_fn((n, inp), |(i, j)| f(i, j, 4) * 2.0);
        let upstream = Array2::from_shape_fn((n, hs), |(i, j)| f(i, j, 5));
        let loss = |l: &Lstm<f64>, x: &Array2<f64>| (l.forward(x.view()).0 * &upstream).sum();
        let (_, tape) = lstm.forward(x.view());
        let mut grad = Lstm {
            w_ih: Array2::zeros(lstm.w_ih.raw_dim()),
            w_hh: Array2::zeros(lstm.w_hh.raw_dim()),
            bias: Array1::zeros(4 * hs),
        };
        let dx = lstm.backward(x.view(), &tape, upstream.view(), &mut grad);
        for i in 0..4 * hs {
            for j in 0..hs {
                let n = numeric(|h| {
                    let mut l = lstm.clone();
                    l.w_hh[[i, j]] += h;
                    loss(&l, &x)
                });
                assert!((n - grad.w_hh[[i, j]]).abs() < 1e-8, "w_hh[{i},{j}]");
            }
            let nb = numeric(|h| {
                let mut l = lstm.clone();
                l.bias[i] += h;
                loss(&l, &x)
            });
            assert!((nb - grad.bias[i]).abs() < 1e-8);
        }
        for t in 0..n {
            for j in 0..inp {
                let nx = numeric(|h| {
                    let mut xx = x.clone();
                    xx[[t, j]] += h;
                    loss(&lstm, &xx)
                });
                assert!((nx - dx[[t, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x = Array3::from_shape_fn((2, 8, 3), |(c, y, t)| (c + y * 2 + t) as f64);
        let (p, upper) = max_pool_freq(&x);
        assert_eq!(p.dim(), (2, 4, 3));
        let back = max_pool_freq_backward::<f64>(&Array3::ones((2, 4, 3)), &upper, 8);
        assert_eq!(back.sum(), 24.0);
        let a = avg_pool_freq(&x);
        assert_eq!(a.dim(), (3, 2));
        assert_eq!(a[[0, 0]], (0..8).map(|y| (y * 2) as f64).sum::<f64>() / 8.0);
    }
}

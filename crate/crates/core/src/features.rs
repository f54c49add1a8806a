//! Feature aggregation and context augmentation.
//!
//! `σ` flattens each window of `γ` embedded frames into one row
//! (`N × γ·C`, `N = ⌊l^f/γ⌋`). The augmented sequence appends a single-cycle
//! positional encoding and two min-max normalized statistics of `1 − DSSM`:
//!
//! ```text
//! σ′ = [σ | sin(pos) | cos(pos) | sum_norm | mean_norm]
//! ```

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norms below this are treated as zero rows.
pub const ZERO_NORM: f64 = 1e-12;

/// Row-major flattening of consecutive `γ`-frame windows; trailing frames are dropped.
pub fn aggregate<T: Scalar>(embedded: ArrayView2<T>, gamma: usize) -> Result<Array2<T>> {
    let (l_f, c) = embedded.dim();
    if gamma == 0 || l_f < gamma {
        return Err(Error::InvalidInput(format!(
            "cannot aggregate {l_f} frames with window {gamma}"
        )));
    }
    let n = l_f / gamma;
    let kept = embedded.slice(s![..n * gamma, ..]);
    let flat: Vec<T> = kept.iter().copied().collect();
    Ok(Array2::from_shape_vec((n, gamma * c), flat).expect("shape arithmetic"))
}

/// Inverse of [`aggregate`] for gradients: dropped frames receive zero.
pub fn disaggregate<T: Scalar>(sigma: ArrayView2<T>, l_f: usize, channels: usize) -> Array2<T> {
    let mut out = Array2::zeros((l_f, channels));
    let rows = sigma.len() / channels;
    let flat: Vec<T> = sigma.iter().copied().collect();
    out.slice_mut(s![..rows, ..])
        .assign(&ArrayView2::from_shape((rows, channels), &flat).expect("shape arithmetic"));
    out
}

/// `(sin pos_i, cos pos_i)` with `pos_i = 2πi / (N − 1)`; `pos_0 = 0` when `N = 1`.
pub fn single_cycle_pe<T: Scalar>(n: usize) -> Array2<T> {
    let mut pe = Array2::zeros((n, 2));
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..n {
        let pos = if n > 1 {
            2.0 * std::f64::consts::PI * i as f64 / denom
        } else {
            0.0
        };
        pe[[i, 0]] = T::from_f64c(pos.sin());
        pe[[i, 1]] = T::from_f64c(pos.cos());
    }
    pe
}

fn normalized_rows<T: Scalar>(sigma: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let mut unit = sigma.to_owned();
    let mut norms = Vec::with_capacity(sigma.nrows());
    for mut row in unit.rows_mut() {
        let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        if norm.to_f64c() < ZERO_NORM {
            row.fill(T::zero());
            norms.push(T::zero());
        } else {
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
    }
    (unit, norms)
}

/// Pairwise cosine similarity of the rows of `σ`. Pairs involving a zero row are 0.
pub fn dssm<T: Scalar>(sigma: ArrayView2<T>) -> Array2<T> {
    let (unit, norms) = normalized_rows(sigma);
    let mut d = unit.dot(&unit.t());
    for i in 0..d.nrows() {
        if norms[i] > T::zero() {
            d[[i, i]] = T::one();
        }
    }
    d.mapv_inplace(|v| v.max(-T::one()).min(T::one()));
    d
}

/// Min-max normalization; a constant column maps to zeros.
fn min_max<T: Scalar>(values: &[T]) -> MinMax<T> {
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[argmin] {
            argmin = i;
        }
        if v > values[argmax] {
            argmax = i;
        }
    }
    let range = values[argmax] - values[argmin];
    let normalized = if range > T::zero() {
        values.iter().map(|&v| (v - values[argmin]) / range).collect()
    } else {
        vec![T::zero(); values.len()]
    };
    MinMax {
        normalized,
        argmin,
        argmax,
        range,
    }
}

#[derive(Debug, Clone)]
struct MinMax<T> {
    normalized: Vec<T>,
    argmin: usize,
    argmax: usize,
    range: T,
}

impl<T: Scalar> MinMax<T> {
    /// Gradient with respect to the raw values given the gradient of the normalized ones.
    fn backward(&self, grad: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); grad.len()];
        if !(self.range > T::zero()) {
            return out;
        }
        let total: T = grad.iter().fold(T::zero(), |a, &g| a + g);
        let weighted: T = grad
            .iter()
            .zip(&self.normalized)
            .fold(T::zero(), |a, (&g, &u)| a + g * u);
        for (o, &g) in out.iter_mut().zip(grad) {
            *o = g / self.range;
        }
        out[self.argmin] = out[self.argmin] - (total - weighted) / self.range;
        out[self.argmax] = out[self.argmax] - weighted / self.range;
        out
    }
}

/// Per-row sum and mean of `1 − D`, each min-max normalized over rows (`N × 2`).
pub fn dssm_stats<T: Scalar>(d: ArrayView2<T>) -> Array2<T> {
    let n = d.nrows();
    let sums: Vec<T> = d
        .rows()
        .into_iter()
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + (T::one() - v)))
        .collect();
    let means: Vec<T> = sums.iter().map(|&s| s / T::from_usize(n).unwrap()).collect();
    let (ns, nm) = (min_max(&sums), min_max(&means));
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        out[[i, 0]] = ns.normalized[i];
        out[[i, 1]] = nm.normalized[i];
    }
    out
}

/// Intermediate values of the differentiable DSSM-statistics path.
#[derive(Debug, Clone)]
pub struct DssmStatsTape<T> {
    unit: Array2<T>,
    norms: Vec<T>,
    sum_norm: MinMax<T>,
    mean_norm: MinMax<T>,
}

/// Differentiable [`dssm_stats`]`(`[`dssm`]`(σ))`.
pub fn dssm_stats_forward<T: Scalar>(sigma: ArrayView2<T>) -> (Array2<T>, DssmStatsTape<T>) {
    let n = sigma.nrows();
    let (unit, norms) = normalized_rows(sigma);
    let mut d = unit.dot(&unit.t());
    for i in 0..n {
        if norms[i] > T::zero() {
            d[[i, i]] = T::one();
        }
    }
    let nf = T::from_usize(n).unwrap();
    let sums: Vec<T> = d.rows().into_iter().map(|row| nf - row.sum()).collect();
    let means: Vec<T> = sums.iter().map(|&s| s / nf).collect();
    let sum_norm = min_max(&sums);
    let mean_norm = min_max(&means);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        out[[i, 0]] = sum_norm.normalized[i];
        out[[i, 1]] = mean_norm.normalized[i];
    }
    (
        out,
        DssmStatsTape {
            unit,
            norms,
            sum_norm,
            mean_norm,
        },
    )
}

impl<T: Scalar> DssmStatsTape<T> {
    /// Gradient with respect to `σ` given the gradient of the `N × 2` statistics.
    pub fn backward(&self, d_stats: ArrayView2<T>) -> Array2<T> {
        let n = self.unit.nrows();
        let nf = T::from_usize(n).unwrap();
        let g_sum: Vec<T> = d_stats.column(0).to_vec();
        let g_mean: Vec<T> = d_stats.column(1).to_vec();
        let mut d_raw = self.sum_norm.backward(&g_sum);
        for (d, g) in d_raw.iter_mut().zip(self.mean_norm.backward(&g_mean)) {
            *d = *d + g / nf;
        }
        // s_i = N − Σ_j D_ij, so ∂L/∂D_ij = −d_raw[i]; the diagonal is constant.
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g[[i, j]] = -d_raw[i];
                }
            }
        }
        let sym = &g + &g.t();
        let d_unit = sym.dot(&self.unit);
        let mut d_sigma = Array2::zeros(self.unit.raw_dim());
        for i in 0..n {
            let norm = self.norms[i];
            if norm == T::zero() {
                continue;
            }
            let u = self.unit.row(i);
            let du = d_unit.row(i);
            let proj = u.dot(&du);
            let mut row = d_sigma.row_mut(i);
            for k in 0..u.len() {
                row[k] = (du[k] - u[k] * proj) / norm;
            }
        }
        d_sigma
    }
}

/// Which augmentation columns are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub pe: bool,
    pub dssm_sum: bool,
    pub dssm_mean: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            pe: true,
            dssm_sum: true,
            dssm_mean: true,
        }
    }
}

impl Augment {
    pub fn extra_columns(&self) -> usize {
        2 * self.pe as usize + self.dssm_sum as usize + self.dssm_mean as usize
    }

    pub fn width(&self, base: usize) -> usize {
        base + self.extra_columns()
    }
}

/// `[σ | sin | cos | sum | mean]` with disabled columns removed.
pub fn concat_features<T: Scalar>(
    sigma: ArrayView2<T>,
    pe: ArrayView2<T>,
    stats: ArrayView2<T>,
    augment: Augment,
) -> Result<Array2<T>> {
    let n = sigma.nrows();
    if pe.nrows() != n || stats.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "row mismatch: sigma {n}, pe {}, stats {}",
            pe.nrows(),
            stats.nrows()
        )));
    }
    let base = sigma.ncols();
    let mut out = Array2::zeros((n, augment.width(base)));
    out.slice_mut(s![.., ..base]).assign(&sigma);
    let mut col = base;
    if augment.pe {
        out.slice_mut(s![.., col..col + 2]).assign(&pe);
        col += 2;
    }
    if augment.dssm_sum {
        out.column_mut(col).assign(&stats.column(0));
        col += 1;
    }
    if augment.dssm_mean {
        out.column_mut(col).assign(&stats.column(1));
    }
    Ok(out)
}

/// Splits a gradient of `σ′` into the `σ` part and the `N × 2` statistics part.
pub fn split_augmented_grad<T: Scalar>(d_aug: ArrayView2<T>, base: usize, augment: Augment) -> (Array2<T>, Array2<T>) {
    let n = d_aug.nrows();
    let d_sigma = d_aug.slice(s![.., ..base]).to_owned();
    let mut d_stats = Array2::zeros((n, 2));
    let mut col = base + 2 * augment.pe as usize;
    if augment.dssm_sum {
        d_stats.column_mut(0).assign(&d_aug.column(col));
        col += 1;
    }
    if augment.dssm_mean {
        d_stats.column_mut(1).assign(&d_aug.column(col));
    }
    (d_sigma, d_stats)
}

/// Convenience: σ′ from σ with fresh PE and statistics.
pub fn augment<T: Scalar>(sigma: ArrayView2<T>, augment: Augment) -> Result<Array2<T>> {
    let n = sigma.nrows();
    let pe = single_cycle_pe::<T>(n);
    let stats = dssm_stats(dssm(sigma).view());
    concat_features(sigma, pe.view(), stats.view(), augment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn aggregate_shapes() {
        let m = Array2::<f64>::zeros((430, 10));
        assert_eq!(aggregate(m.view(), 43).unwrap().dim(), (10, 430));
        let m = Array2::<f64>::zeros((435, 10));
        assert_eq!(aggregate(m.view(), 43).unwrap().dim(), (10, 430));
        assert!(aggregate(Array2::<f64>::zeros((10, 3)).view(), 43).is_err());
    }

    #[test]
    fn aggregate_identity_window() {
        let m = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(aggregate(m.view(), 1).unwrap(), m);
    }

    #[test]
    fn aggregate_is_row_major_flattening() {
        let m = Array2::from_shape_fn((5, 2), |(i, j)| (10 * i + j) as f64);
        let s = aggregate(m.view(), 2).unwrap();
        assert_eq!(s, array![[0.0, 1.0, 10.0, 11.0], [20.0, 21.0, 30.0, 31.0]]);
        let back = disaggregate(s.view(), 5, 2);
        assert_eq!(back.slice(s![..4, ..]), m.slice(s![..4, ..]));
        assert_eq!(back.row(4).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn pe_examples() {
        let pe = single_cycle_pe::<f64>(10);
        assert_eq!((pe[[0, 0]], pe[[0, 1]]), (0.0, 1.0));
        assert!(pe[[9, 0]].abs() < 1e-9 && (pe[[9, 1]] - 1.0).abs() < 1e-9);
        let pe = single_cycle_pe::<f64>(11);
        assert!(pe[[5, 0]].abs() < 1e-9 && (pe[[5, 1]] + 1.0).abs() < 1e-9);
        let pe = single_cycle_pe::<f64>(1);
        assert_eq!((pe[[0, 0]], pe[[0, 1]]), (0.0, 1.0));
    }

    #[test]
    fn dssm_hand_example() {
        let sigma = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let d = dssm(sigma.view());
        assert_eq!(d, array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let stats = dssm_stats(d.view());
        assert_eq!(stats, array![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn dssm_zero_row() {
        let sigma = array![[0.0, 0.0], [1.0, 2.0]];
        let d = dssm(sigma.view());
        assert_eq!(d, array![[0.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn stats_degenerate_cases() {
        let same = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let stats = dssm_stats(dssm(same.view()).view());
        assert!(stats.iter().all(|&v| v == 0.0));
        let one = array![[3.0, 4.0]];
        assert_eq!(dssm_stats(dssm(one.view()).view()), array![[0.0, 0.0]]);
    }

    #[test]
    fn tape_matches_public_stats() {
        let sigma = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.5);
        let (stats, _) = dssm_stats_forward(sigma.view());
        let reference = dssm_stats(dssm(sigma.view()).view());
        for (a, b) in stats.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let sigma = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 5 + j * 7) % 11) as f64 * 0.3 + 0.1);
        let weights = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 - 2.0) * 0.7 + j as f64 * 0.4);
        let loss = |s: &Array2<f64>| (dssm_stats_forward(s.view()).0 * &weights).sum();
        let (_, tape) = dssm_stats_forward(sigma.view());
        let analytic = tape.backward(weights.view());
        let h = 1e-6;
        for idx in 0..sigma.len() {
            let (i, j) = (idx / 3, idx % 3);
            let mut p = sigma.clone();
            p[[i, j]] += h;
            let mut m = sigma.clone();
            m[[i, j]] -= h;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (numeric - analytic[[i, j]]).abs() < 1e-6,
                "({i},{j}): {numeric} vs {}",
                analytic[[i, j]]
            );
        }
    }

    #[test]
    fn concat_widths() {
        let sigma = Array2::<f64>::zeros((10, 430));
        let pe = single_cycle_pe::<f64>(10);
        let stats = Array2::<f64>::zeros((10, 2));
        let w = |a: Augment| concat_features(sigma.view(), pe.view(), stats.view(), a).unwrap().ncols();
        assert_eq!(w(Augment::default()), 434);
        assert_eq!(w(Augment { pe: false, ..Default::default() }), 432);
        assert_eq!(
            w(Augment {
                dssm_sum: false,
                dssm_mean: false,
                ..Default::default()
            }),
            432
        );
        assert_eq!(w(Augment { dssm_mean: false, ..Default::default() }), 433);
        let bad = Array2::<f64>::zeros((9, 2));
        assert!(concat_features(sigma.view(), bad.view(), stats.view(), Augment::default()).is_err());
    }

    #[test]
    fn column_layout() {
        let sigma = array![[5.0], [6.0], [7.0]];
        let pe = array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]];
        let stats = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let out = concat_features(sigma.view(), pe.view(), stats.view(), Augment::default()).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![6.0, 0.3, 0.4, 3.0, 4.0]);
        let no_sum = Augment { dssm_sum: false, ..Default::default() };
        let out = concat_features(sigma.view(), pe.view(), stats.view(), no_sum).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![6.0, 0.3, 0.4, 4.0]);
        let (ds, dst) = split_augmented_grad(out.view(), 1, no_sum);
        assert_eq!(ds.column(0).to_vec(), vec![5.0, 6.0, 7.0]);
        assert_eq!(dst.row(1).to_vec(), vec![0.0, 4.0]);
    }
}

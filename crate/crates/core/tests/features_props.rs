//! Properties of aggregation, positional encoding and DSSM statistics.

use ndarray::{array, Array2};
use proptest::prelude::*;
use sonalyzer::features::{aggregate, augment, dssm, dssm_stats, single_cycle_pe, Augment};

fn matrix(rows: usize, cols: usize, nonneg: bool) -> impl Strategy<Value = Array2<f64>> {
    let range = if nonneg { 0.0..5.0 } else { -5.0..5.0 };
    prop::collection::vec(range, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Sigma with some rows forced to zero.
fn sigma_with_zero_rows() -> impl Strategy<Value = Array2<f64>> {
    (1usize..12, 1usize..8).prop_flat_map(|(n, w)| {
        (matrix(n, w, true), prop::collection::vec(any::<bool>(), n)).prop_map(|(mut m, zero)| {
            for (i, z) in zero.into_iter().enumerate() {
                if z {
                    m.row_mut(i).fill(0.0);
                }
            }
            m
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn augmented_width(l_f in 1usize..300, c in 1usize..12, gamma in 1usize..50,
                       pe in any::<bool>(), sum in any::<bool>(), mean in any::<bool>()) {
        prop_assume!(l_f >= gamma);
        let embedded = Array2::<f64>::from_elem((l_f, c), 0.5);
        let sigma = aggregate(embedded.view(), gamma).unwrap();
        prop_assert_eq!(sigma.dim(), (l_f / gamma, gamma * c));
        let full = augment(sigma.view(), Augment::default()).unwrap();
        prop_assert_eq!(full.ncols(), gamma * c + 4);
        let flags = Augment { pe, dssm_sum: sum, dssm_mean: mean };
        let part = augment(sigma.view(), flags).unwrap();
        let removed = 2 * (!pe as usize) + (!sum as usize) + (!mean as usize);
        prop_assert_eq!(part.ncols(), gamma * c + 4 - removed);
    }

    #[test]
    fn aggregation_is_lossless(m in (1usize..60, 1usize..6).prop_flat_map(|(l, c)| matrix(l, c, false)),
                               gamma in 1usize..10) {
        prop_assume!(m.nrows() >= gamma);
        let sigma = aggregate(m.view(), gamma).unwrap();
        let n = sigma.nrows();
        let back = sigma.into_shape_with_order((n * gamma, m.ncols())).unwrap();
        prop_assert_eq!(back, m.slice(ndarray::s![..n * gamma, ..]).to_owned());
    }

    #[test]
    fn dssm_symmetric_bounded(sigma in sigma_with_zero_rows()) {
        let d = dssm(sigma.view());
        let n = sigma.nrows();
        for i in 0..n {
            let zero = sigma.row(i).iter().all(|&v| v == 0.0);
            prop_assert_eq!(d[[i, i]], if zero { 0.0 } else { 1.0 });
            for j in 0..n {
                prop_assert!((d[[i, j]] - d[[j, i]]).abs() <= 1e-6);
                prop_assert!((0.0..=1.0).contains(&d[[i, j]]));
                if zero {
                    prop_assert_eq!(d[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn dssm_matches_pairwise_cosine(sigma in (2usize..8, 1usize..6).prop_flat_map(|(n, w)| matrix(n, w, false))) {
        let d = dssm(sigma.view());
        for i in 0..sigma.nrows() {
            for j in 0..sigma.nrows() {
                let (a, b) = (sigma.row(i), sigma.row(j));
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let expected = if i == j { 1.0 } else { dot / (na * nb) };
                prop_assert!((d[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_in_unit_range(sigma in sigma_with_zero_rows()) {
        let d = dssm(sigma.view());
        let stats = dssm_stats(d.view());
        let raw: Vec<f64> = d.rows().into_iter().map(|r| r.iter().map(|v| 1.0 - v).sum()).collect();
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for i in 0..sigma.nrows() {
            prop_assert!((0.0..=1.0).contains(&stats[[i, 0]]));
            // sum and mean columns coincide under min-max normalization
            prop_assert!((stats[[i, 0]] - stats[[i, 1]]).abs() < 1e-12);
            if hi > lo {
                if raw[i] == hi { prop_assert_eq!(stats[[i, 0]], 1.0); }
                if raw[i] == lo { prop_assert_eq!(stats[[i, 0]], 0.0); }
            }
        }
    }
}

#[test]
fn pe_identities_every_length() {
    for n in 2..=500 {
        let pe = single_cycle_pe::<f64>(n);
        for i in 0..n {
            let (s, c) = (pe[[i, 0]], pe[[i, 1]]);
            assert!((s * s + c * c - 1.0).abs() < 1e-9, "N={n} i={i}");
        }
        assert_eq!((pe[[0, 0]], pe[[0, 1]]), (0.0, 1.0));
        assert!(pe[[n - 1, 0]].abs() < 1e-9 && (pe[[n - 1, 1]] - 1.0).abs() < 1e-9, "N={n}");
    }
    let pe = single_cycle_pe::<f64>(11);
    assert!(pe[[5, 0]].abs() < 1e-9 && (pe[[5, 1]] + 1.0).abs() < 1e-9);
    assert_eq!(single_cycle_pe::<f64>(1).row(0).to_vec(), vec![0.0, 1.0]);
}

#[test]
fn three_row_example() {
    let sigma = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let d = dssm(sigma.view());
    assert_eq!(d, array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let stats = dssm_stats(d.view());
    assert_eq!(stats, array![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]);
}

#[test]
fn degenerate_stats() {
    let same = Array2::from_elem((4, 3), 2.0);
    assert!(dssm_stats(dssm(same.view()).view()).iter().all(|&v| v == 0.0));
    let one = Array2::from_elem((1, 3), 2.0);
    assert!(dssm_stats(dssm(one.view()).view()).iter().all(|&v| v == 0.0));
}

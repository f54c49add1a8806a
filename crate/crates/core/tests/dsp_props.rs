//! Front-end properties: frame count, nonnegativity, scaling and time shifts.

use proptest::prelude::*;
use sonalyzer::dsp::{frame_count, mel_filterbank, mel_spectrogram, AudioClip, DspConfig};

/// `⌊dur · sr / hop⌋` in exact integer arithmetic on the binary expansion of `dur`.
fn exact_floor(dur: f64, sr: u32, hop: usize) -> usize {
    let bits = dur.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
    let mantissa = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
    let num = mantissa as u128 * sr as u128;
    if exp >= 0 {
        ((num << exp) / hop as u128) as usize
    } else {
        (num / ((hop as u128) << (-exp))) as usize
    }
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 20001) as f32 / 10000.0 - 1.0
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn frame_count_is_floor(dur in 0.5f64..600.0, sr in prop::sample::select(vec![8000u32, 16000, 22050, 44100, 48000]),
                            hop in 64usize..2048) {
        prop_assert_eq!(frame_count(dur, sr, hop), exact_floor(dur, sr, hop));
    }

    #[test]
    fn frame_count_of_sample_lengths(n in 1usize..2_000_000, hop in 64usize..2048) {
        let sr = 22050;
        prop_assert_eq!(frame_count(n as f64 / sr as f64, sr, hop), n / hop);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn columns_and_nonnegativity(secs in 1.0f64..60.0, seed in any::<u64>()) {
        let cfg = DspConfig::default();
        let n = (secs * cfg.sr as f64) as usize;
        let clip = AudioClip { samples: noise(n, seed), sr: cfg.sr };
        let mel = mel_spectrogram(&clip, &cfg).unwrap();
        prop_assert_eq!(mel.n_frames(), frame_count(clip.duration_s(), cfg.sr, cfg.hop));
        prop_assert_eq!(mel.n_mels(), 128);
        prop_assert!(mel.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn amplitude_scaling_is_quadratic(alpha in 0.1f64..10.0, seed in any::<u64>()) {
        let cfg = DspConfig::default();
        let base = noise(22050, seed);
        let a = mel_spectrogram(&AudioClip { samples: base.clone(), sr: cfg.sr }, &cfg).unwrap();
        let scaled: Vec<f32> = base.iter().map(|&v| (v as f64 * alpha) as f32).collect();
        let b = mel_spectrogram(&AudioClip { samples: scaled, sr: cfg.sr }, &cfg).unwrap();
        let a2 = alpha * alpha;
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            let expected = *x as f64 * a2;
            prop_assert!((*y as f64 - expected).abs() <= 1e-6 * expected.abs().max(1e-3), "{} vs {}", y, expected);
        }
    }

    #[test]
    fn hop_shift_moves_columns(k in 1usize..8, seed in any::<u64>()) {
        let cfg = DspConfig::default();
        let long = noise(3 * 22050, seed);
        let shift = k * cfg.hop;
        let a = mel_spectrogram(&AudioClip { samples: long[shift..].to_vec(), sr: cfg.sr }, &cfg).unwrap();
        let b = mel_spectrogram(&AudioClip { samples: long.clone(), sr: cfg.sr }, &cfg).unwrap();
        // interior frames only; edge frames see reflection padding
        let margin = cfg.n_fft / cfg.hop / 2 + 1;
        for j in margin..a.n_frames() - margin {
            for m in 0..cfg.n_mels {
                let (x, y) = (a.data[[m, j]] as f64, b.data[[m, j + k]] as f64);
                prop_assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-3));
            }
        }
    }
}

#[test]
fn frame_count_examples() {
    assert_eq!(frame_count(10.0, 22050, 512), 430);
    assert_eq!(frame_count(1.0, 22050, 512), 43);
    assert_eq!(frame_count(0.01, 22050, 512), 0);
}

#[test]
fn filterbank_shape_and_support() {
    let cfg = DspConfig::default();
    let bank = mel_filterbank(&cfg);
    assert_eq!(bank.weights().dim(), (128, 1025));
    assert!(bank.weights().iter().all(|&w| w >= 0.0));
    let bin_hz = cfg.sr as f64 / cfg.n_fft as f64;
    for m in 1..127 {
        let (lo, hi) = bank.support(m);
        // support lies between the neighbouring filters' centres
        assert!(lo as f64 * bin_hz >= bank.center_hz(m - 1) - 1e-9, "band {m}");
        assert!((hi - 1) as f64 * bin_hz <= bank.center_hz(m + 1) + 1e-9, "band {m}");
    }
}

#[test]
fn silence_and_tone() {
    let cfg = DspConfig::default();
    let zero = mel_spectrogram(&AudioClip { samples: vec![0.0; 22050], sr: cfg.sr }, &cfg).unwrap();
    assert!(zero.data.iter().all(|&v| v == 0.0));
    let tone: Vec<f32> = (0..5 * 22050)
        .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 22050.0).sin() as f32)
        .collect();
    let mel = mel_spectrogram(&AudioClip { samples: tone, sr: cfg.sr }, &cfg).unwrap();
    let bank = mel_filterbank(&cfg);
    let col = mel.data.column(100);
    let peak = (0..128).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
    let edges = bank.edges_hz();
    assert!(edges[peak] <= 440.0 && 440.0 <= edges[peak + 2], "peak band {peak}");
}

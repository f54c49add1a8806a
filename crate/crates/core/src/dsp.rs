//! Audio decoding and the mel-spectrogram front end.
//!
//! `M(x, m) = Σ_f H_m(f) · S(x, f)` where `S` is the power spectrogram of a
//! centered, reflection-padded STFT and `H` a bank of triangular mel filters
//! spanning 0 Hz to Nyquist.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    /// Periodic (DFT-even) window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let step = 2.0 * std::f64::consts::PI / n as f64;
        (0..n)
            .map(|i| match self {
                WindowKind::Hann => 0.5 - 0.5 * (step * i as f64).cos(),
                WindowKind::Hamming => 0.54 - 0.46 * (step * i as f64).cos(),
                WindowKind::Rectangular => 1.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sr: u32,
    pub hop: usize,
    pub n_mels: usize,
    pub n_fft: usize,
    pub window: WindowKind,
    /// Apply `ln(1 + M)` after the filterbank.
    pub log_compress: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sr: 22050,
            hop: 512,
            n_mels: 128,
            n_fft: 2048,
            window: WindowKind::Hann,
            log_compress: false,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sr == 0 {
            return Err(Error::Config("dsp.sr must be positive".into()));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config("dsp.hop must satisfy 0 < hop <= n_fft".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("dsp.n_mels must be at least 1".into()));
        }
        Ok(())
    }

    /// Frames per second, rounded to the nearest integer (43 at the defaults).
    pub fn frames_per_second(&self) -> usize {
        ((self.sr as f64 / self.hop as f64).round() as usize).max(1)
    }

    /// Seconds spanned by one spectrogram frame.
    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sr as f64
    }
}

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sr: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sr as f64
    }
}

/// `⌊dur · sr / hop⌋`, snapping values within 1e-9 (relative) below an integer up to it.
pub fn frame_count(dur_s: f64, sr: u32, hop: usize) -> usize {
    let x = dur_s * sr as f64 / hop as f64;
    if !(x > 0.0) {
        return 0;
    }
    let k = x.floor();
    if (k + 1.0) - x <= 1e-9 * x.max(1.0) {
        (k + 1.0) as usize
    } else {
        k as usize
    }
}

/// Decodes a WAV file to mono (channel mean) and resamples to `config.sr`.
pub fn load_audio(path: &Path, config: &DspConfig) -> Result<AudioClip> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    if ext.as_deref() != Some("wav") {
        return Err(Error::UnsupportedCodec(format!(
            "{} (only PCM/float WAV is decoded)",
            path.display()
        )));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let decode_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(decode_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(decode_err)?
        }
    };
    let mono = mixdown(&interleaved, channels);
    if mono.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            reason: "non-finite sample".into(),
        });
    }
    let samples = if spec.sample_rate == config.sr {
        mono
    } else {
        resample(&mono, spec.sample_rate, config.sr)
    };
    Ok(AudioClip {
        samples,
        sr: config.sr,
    })
}

/// Writes a clip as 32-bit float mono WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sr,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn mixdown(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(input: &[f32], from_sr: u32, to_sr: u32) -> Vec<f32> {
    const HALF_TAPS: isize = 32;
    if from_sr == to_sr || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_sr as f64 / from_sr as f64;
    let cutoff = ratio.min(1.0);
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    let support = HALF_TAPS as f64 / cutoff;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let center = t.floor() as isize;
            let reach = support.ceil() as isize;
            let mut acc = 0.0f64;
            for k in (center - reach + 1)..=(center + reach) {
                if k < 0 || k as usize >= input.len() {
                    continue;
                }
                let x = t - k as f64;
                if x.abs() >= support {
                    continue;
                }
                let arg = x * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let w = 0.5 + 0.5 * (std::f64::consts::PI * x / support).cos();
                acc += input[k as usize] as f64 * cutoff * sinc * w;
            }
            acc as f32
        })
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney: linear below 1 kHz, logarithmic above.
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular mel filters (`n_mels × (n_fft/2 + 1)`), area-normalized.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    /// Filter edge frequencies in Hz: `n_mels + 2` points.
    edges_hz: Vec<f64>,
    /// Per filter, the half-open range of bins with nonzero weight.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Center frequency of filter `m`.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    pub fn support(&self, m: usize) -> (usize, usize) {
        self.support[m]
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }
}

pub fn mel_filterbank(config: &DspConfig) -> MelFilterbank {
    let n_bins = config.n_fft / 2 + 1;
    let fmax = config.sr as f64 / 2.0;
    let (mel_lo, mel_hi) = (hz_to_mel(0.0), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * config.sr as f64 / config.n_fft as f64)
        .collect();
    let mut weights = Array2::<f64>::zeros((config.n_mels, n_bins));
    let mut support = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let norm = 2.0 / (hi - lo);
        let mut first = n_bins;
        let mut last = 0;
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                weights[[m, k]] = w * norm;
                first = first.min(k);
                last = k + 1;
            }
        }
        support.push(if first < last { (first, last) } else { (0, 0) });
    }
    MelFilterbank {
        weights,
        edges_hz,
        support,
    }
}

/// Column-per-frame power spectrogram (`(n_fft/2 + 1) × l^f`).
#[derive(Debug, Clone)]
pub struct PowerSpectrogram {
    pub power: Array2<f64>,
}

/// Nonnegative `n_mels × l^f` time-frequency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f32>,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT power with reflection padding; frame `k` is centered on sample `k · hop`.
pub fn power_spectrogram(samples: &[f32], config: &DspConfig) -> Result<PowerSpectrogram> {
    let n_frames = samples.len() / config.hop;
    if n_frames == 0 {
        return Err(Error::InvalidInput(format!(
            "clip of {} samples is shorter than one hop ({})",
            samples.len(),
            config.hop
        )));
    }
    let n_fft = config.n_fft;
    let n_bins = n_fft / 2 + 1;
    let window = config.window.coefficients(n_fft);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let mut power = Array2::<f64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let half = (n_fft / 2) as isize;
    for frame in 0..n_frames {
        let start = (frame * config.hop) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + n as isize, samples.len());
            *slot = Complex::new(samples[idx] as f64 * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            power[[k, frame]] = buf[k].norm_sqr();
        }
    }
    Ok(PowerSpectrogram { power })
}

/// Projects a power spectrogram through the filterbank.
pub fn apply_filterbank(spec: &PowerSpectrogram, bank: &MelFilterbank, log_compress: bool) -> MelSpectrogram {
    let n_frames = spec.power.ncols();
    let mut data = Array2::<f32>::zeros((bank.n_mels(), n_frames));
    for m in 0..bank.n_mels() {
        let (lo, hi) = bank.support(m);
        for x in 0..n_frames {
            let mut acc = 0.0f64;
            for k in lo..hi {
                acc += bank.weights[[m, k]] * spec.power[[k, x]];
            }
            if log_compress {
                acc = acc.ln_1p();
            }
            data[[m, x]] = acc as f32;
        }
    }
    MelSpectrogram { data }
}

pub fn mel_spectrogram(clip: &AudioClip, config: &DspConfig) -> Result<MelSpectrogram> {
    mel_spectrogram_with(clip, config, &mel_filterbank(config))
}

/// Same as [`mel_spectrogram`] with a prebuilt filterbank.
pub fn mel_spectrogram_with(clip: &AudioClip, config: &DspConfig, bank: &MelFilterbank) -> Result<MelSpectrogram> {
    if clip.sr != config.sr {
        return Err(Error::InvalidInput(format!(
            "clip sample rate {} differs from configured {}",
            clip.sr, config.sr
        )));
    }
    let spec = power_spectrogram(&clip.samples, config)?;
    Ok(apply_filterbank(&spec, bank, config.log_compress))
}

/// Writes a feature matrix in the cache layout: `u32 rows`, `u64 cols`, then
/// little-endian `f32` values column by column.
pub fn write_feature_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(mel.n_mels() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(mel.n_frames() as u64).to_le_bytes()).map_err(io)?;
    for x in 0..mel.n_frames() {
        for m in 0..mel.n_mels() {
            w.write_all(&mel.data[[m, x]].to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_feature_cache(path: &Path) -> Result<MelSpectrogram> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::InvalidInput(format!("{}: truncated feature header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(Error::InvalidInput(format!(
            "{}: expected {rows}x{cols} floats, found {} bytes",
            path.display(),
            body.len()
        )));
    }
    let mut data = Array2::<f32>::zeros((rows, cols));
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (x, m) = (i / rows, i % rows);
        data[[m, x]] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(MelSpectrogram { data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f32) -> AudioClip {
        let sr = 22050;
        let n = (secs * sr as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
                .collect(),
            sr,
        }
    }

    #[test]
    fn frame_count_examples() {
        assert_eq!(frame_count(10.0, 22050, 512), 430);
        assert_eq!(frame_count(1.0, 22050, 512), 43);
        assert_eq!(frame_count(0.01, 22050, 512), 0);
    }

    #[test]
    fn filterbank_shape_and_sign() {
        let bank = mel_filterbank(&DspConfig::default());
        assert_eq!(bank.weights().dim(), (128, 1025));
        assert!(bank.weights().iter().all(|&w| w >= 0.0));
        for m in 0..128 {
            let (lo, hi) = bank.support(m);
            assert!(hi > lo, "filter {m} is empty");
        }
    }

    #[test]
    fn zero_clip_gives_zero_mel() {
        let clip = AudioClip {
            samples: vec![0.0; 22050],
            sr: 22050,
        };
        let mel = mel_spectrogram(&clip, &DspConfig::default()).unwrap();
        assert_eq!(mel.n_frames(), 43);
        assert!(mel.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_amplitude_quadruples_power() {
        let cfg = DspConfig::default();
        let a = mel_spectrogram(&sine(440.0, 1.0, 0.25), &cfg).unwrap();
        let b = mel_spectrogram(&sine(440.0, 1.0, 0.5), &cfg).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((y - 4.0 * x).abs() <= 1e-5 * y.abs().max(1e-3));
        }
    }

    #[test]
    fn too_short_clip_errors() {
        let clip = AudioClip {
            samples: vec![0.1; 100],
            sr: 22050,
        };
        assert!(mel_spectrogram(&clip, &DspConfig::default()).is_err());
    }

    #[test]
    fn sine_energy_lands_near_440() {
        let cfg = DspConfig::default();
        let bank = mel_filterbank(&cfg);
        let mel = mel_spectrogram(&sine(440.0, 5.0, 0.5), &cfg).unwrap();
        let col = mel.data.column(100);
        let peak = (0..128).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        let e = bank.edges_hz();
        assert!(e[peak] < 440.0 && 440.0 < e[peak + 2], "peak filter {peak}");
    }

    #[test]
    fn resample_identity_and_length() {
        let x: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(resample(&x, 22050, 22050), x);
        assert_eq!(resample(&x, 44100, 22050).len(), 500);
    }

    #[test]
    fn resample_preserves_low_tone() {
        let sr_in = 44100u32;
        let x: Vec<f32> = (0..44100)
            .map(|i| (2.0 * std::f64::consts::PI * 300.0 * i as f64 / sr_in as f64).sin() as f32)
            .collect();
        let y = resample(&x, sr_in, 22050);
        for (j, &v) in y.iter().enumerate().skip(200).take(21000) {
            let expected = (2.0 * std::f64::consts::PI * 300.0 * j as f64 / 22050.0).sin() as f32;
            assert!((v - expected).abs() < 2e-3, "sample {j}: {v} vs {expected}");
        }
    }

    #[test]
    fn wav_round_trip_stereo_mixdown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let mono: Vec<f32> = (0..2048).map(|i| ((i % 37) as f32 - 18.0) / 40.0).collect();
        for &s in &mono {
            w.write_sample(s).unwrap();
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_audio(&path, &DspConfig::default()).unwrap();
        assert_eq!(clip.samples, mono);
    }

    #[test]
    fn empty_wav_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        write_wav(&path, &AudioClip { samples: vec![], sr: 22050 }).unwrap();
        assert!(matches!(
            load_audio(&path, &DspConfig::default()),
            Err(Error::EmptyAudio(_))
        ));
    }

    #[test]
    fn unsupported_extension() {
        assert!(matches!(
            load_audio(Path::new("x.mp3"), &DspConfig::default()),
            Err(Error::UnsupportedCodec(_))
        ));
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mel");
        let mel = MelSpectrogram {
            data: Array2::from_shape_fn((5, 7), |(m, x)| (m * 10 + x) as f32 * 0.5),
        };
        write_feature_cache(&path, &mel).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &5u32.to_le_bytes());
        assert_eq!(&bytes[4..12], &7u64.to_le_bytes());
        // column-major: second value is row 1 of frame 0
        assert_eq!(&bytes[16..20], &5.0f32.to_le_bytes());
        assert_eq!(read_feature_cache(&path).unwrap(), mel);
    }
}

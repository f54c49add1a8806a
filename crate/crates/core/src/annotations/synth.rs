//! Desk-scale synthetic corpus: pieces with E/D/R segments whose textures
//! differ in band occupancy, amplitude-modulation rate and level. Versions of
//! a piece share the form and vary timing and orchestration.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotationRecord, Label, ManifestFileEntry, Segment, StructureLabel};
use crate::dsp::{self, AudioClip, DspConfig};
use crate::error::{Error, Result};

const SR: u32 = 22050;

#[derive(Debug, Clone, Copy)]
enum TextureKind {
    /// A few harmonics of one fundamental.
    Tonal,
    /// Many partials spread over one to two octaves.
    NoiseBand,
    /// A dense cluster inside a third of an octave.
    Cluster,
}

#[derive(Debug, Clone)]
struct Texture {
    partials: Vec<f64>,
    am_rate_hz: f64,
    am_depth: f64,
    level: f64,
}

impl Texture {
    fn draw(kind: TextureKind, register: (f64, f64), level: f64, rng: &mut ChaCha8Rng) -> Texture {
        let (lo, hi) = register;
        debug_assert!(hi > 2.0 * lo);
        let (partials, am_rate_hz, am_depth) = match kind {
            TextureKind::Tonal => {
                let f0 = rng.random_range(lo..lo * 1.5);
                ((1..=3).map(|h| f0 * h as f64).collect(), rng.random_range(0.5..1.5), 0.3)
            }
            TextureKind::NoiseBand => {
                let octaves: f64 = rng.random_range(1.0..2.0);
                let base = rng.random_range(lo..(hi / 2f64.powf(octaves)).max(lo * 1.01));
                let top = base * 2f64.powf(octaves);
                (
                    (0..24).map(|_| rng.random_range(base..top)).collect(),
                    rng.random_range(4.0..7.0),
                    0.8,
                )
            }
            TextureKind::Cluster => {
                let base = rng.random_range(lo..hi / 1.26);
                (
                    (0..8).map(|_| rng.random_range(base..base * 1.26)).collect(),
                    rng.random_range(2.0..3.5),
                    0.5,
                )
            }
        };
        Texture {
            partials,
            am_rate_hz,
            am_depth,
            level,
        }
    }

    fn render(&self, out: &mut [f32], rng: &mut ChaCha8Rng) {
        let amp = self.level / (self.partials.len() as f64).sqrt();
        let tau = 2.0 * std::f64::consts::PI;
        let am_phase: f64 = rng.random_range(0.0..tau);
        for &f in &self.partials {
            let phase: f64 = rng.random_range(0.0..tau);
            // phasor recurrence, renormalized every block
            let (step_s, step_c) = (tau * f / SR as f64).sin_cos();
            let (mut s, mut c) = phase.sin_cos();
            for (n, slot) in out.iter_mut().enumerate() {
                if n % 4096 == 0 {
                    let r = (s * s + c * c).sqrt();
                    s /= r;
                    c /= r;
                }
                *slot += (amp * s) as f32;
                let (s2, c2) = (s * step_c + c * step_s, c * step_c - s * step_s);
                s = s2;
                c = c2;
            }
        }
        for (n, slot) in out.iter_mut().enumerate() {
            let t = n as f64 / SR as f64;
            let env = 1.0 - self.am_depth * 0.5 * (1.0 - (tau * self.am_rate_hz * t + am_phase).cos());
            *slot *= env as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub record: AnnotationRecord,
    pub clip: AudioClip,
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub items: Vec<SynthItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureFormat {
    /// 32-bit float WAV audio.
    Wav,
    /// Precomputed (linear) mel features in the cache layout.
    Mel,
}

/// What versions of one piece share: the form.
struct PieceDesign {
    duration_s: f64,
    proportions: [f64; 3],
}

fn design_piece(rng: &mut ChaCha8Rng) -> PieceDesign {
    let e = rng.random_range(0.33..0.43);
    let d = rng.random_range(0.22..0.30);
    PieceDesign {
        duration_s: rng.random_range(30.0..40.0),
        proportions: [e, d, 1.0 - e - d],
    }
}

/// Each version re-orchestrates the sections: texture kinds, registers and
/// levels are re-assigned, so neighbouring sections always differ but not in a
/// fixed way.
fn orchestrate(rng: &mut ChaCha8Rng) -> [Texture; 3] {
    let mut kinds = [TextureKind::Tonal, TextureKind::NoiseBand, TextureKind::Cluster];
    kinds.shuffle(rng);
    let mut registers = [(100.0, 450.0), (500.0, 1600.0), (2000.0, 6000.0)];
    registers.shuffle(rng);
    let mut levels = [0.08, 0.16, 0.3];
    levels.shuffle(rng);
    [0, 1, 2].map(|k| {
        let level = levels[k] * rng.random_range(0.9..1.1);
        Texture::draw(kinds[k], registers[k], level, rng)
    })
}

fn render_version(design: &PieceDesign, piece_id: &str, version_id: &str, rng: &mut ChaCha8Rng) -> SynthItem {
    let lengths: Vec<usize> = design
        .proportions
        .iter()
        .map(|p| (p * design.duration_s * rng.random_range(0.9..1.1) * SR as f64).round() as usize)
        .collect();
    let total: usize = lengths.iter().sum();
    let textures = orchestrate(rng);
    let gain: f64 = rng.random_range(0.8..1.2);
    let mut samples = vec![0.0f32; total];
    let mut segments = Vec::with_capacity(3);
    let mut start = 0usize;
    for (k, (&len, label)) in lengths
        .iter()
        .zip([StructureLabel::E, StructureLabel::D, StructureLabel::R])
        .enumerate()
    {
        let span = &mut samples[start..start + len];
        textures[k].render(span, rng);
        segments.push(Segment {
            label: Label::Structure(label),
            start_s: start as f64 / SR as f64,
            end_s: (start + len) as f64 / SR as f64,
        });
        start += len;
    }
    for s in samples.iter_mut() {
        *s = (*s as f64 * gain) as f32 + rng.random_range(-0.003f32..0.003);
    }
    SynthItem {
        record: AnnotationRecord {
            piece_id: piece_id.to_string(),
            version_id: version_id.to_string(),
            duration_s: total as f64 / SR as f64,
            segments,
            auxiliary: None,
        },
        clip: AudioClip { samples, sr: SR },
    }
}

/// Generates `n_pieces × n_versions` annotated recordings, bitwise reproducible under `seed`.
pub fn synth_fixture(n_pieces: usize, n_versions: usize, seed: u64) -> Result<SynthFixture> {
    if n_pieces == 0 || n_versions == 0 {
        return Err(Error::InvalidInput(
            "synthetic fixture needs at least one piece and one version".into(),
        ));
    }
    let mut items = Vec::with_capacity(n_pieces * n_versions);
    for p in 0..n_pieces {
        let mut piece_rng = ChaCha8Rng::seed_from_u64(seed);
        piece_rng.set_stream(1 + p as u64);
        let design = design_piece(&mut piece_rng);
        let piece_id = format!("piece{p:02}");
        for v in 0..n_versions {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((p as u64 + 1) << 32) | (v as u64 + 1));
            items.push(render_version(&design, &piece_id, &format!("v{v:02}"), &mut rng));
        }
    }
    Ok(SynthFixture { items })
}

/// Writes annotations, audio or features, and `manifest.json` under `dir`.
/// Returns the manifest path.
pub fn write_fixture(dir: &Path, fixture: &SynthFixture, format: FixtureFormat, dsp_config: &DspConfig) -> Result<PathBuf> {
    let ann_dir = dir.join("annotations");
    let data_dir = dir.join(match format {
        FixtureFormat::Wav => "audio",
        FixtureFormat::Mel => "features",
    });
    for d in [&ann_dir, &data_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let linear = DspConfig {
        log_compress: false,
        ..dsp_config.clone()
    };
    let bank = dsp::mel_filterbank(&linear);
    let mut entries = Vec::with_capacity(fixture.items.len());
    for item in &fixture.items {
        let stem = format!("{}__{}", item.record.piece_id, item.record.version_id);
        let ann_rel = PathBuf::from("annotations").join(format!("{stem}.json"));
        let ann_path = dir.join(&ann_rel);
        std::fs::write(&ann_path, item.record.to_json()).map_err(|e| Error::io(&ann_path, e))?;
        let data_rel = match format {
            FixtureFormat::Wav => {
                let rel = PathBuf::from("audio").join(format!("{stem}.wav"));
                dsp::write_wav(&dir.join(&rel), &item.clip)?;
                rel
            }
            FixtureFormat::Mel => {
                let rel = PathBuf::from("features").join(format!("{stem}.mel"));
                let clip = if item.clip.sr == linear.sr {
                    item.clip.clone()
                } else {
                    AudioClip {
                        samples: dsp::resample(&item.clip.samples, item.clip.sr, linear.sr),
                        sr: linear.sr,
                    }
                };
                let mel = dsp::mel_spectrogram_with(&clip, &linear, &bank)?;
                dsp::write_feature_cache(&dir.join(&rel), &mel)?;
                rel
            }
        };
        entries.push(ManifestFileEntry {
            annotation: ann_rel,
            audio: data_rel,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

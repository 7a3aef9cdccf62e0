//! Synthetic audio-visual corpus for end-to-end exercise of the pipeline.
//!
//! Real clips pair a harmonic "voice" (a small stack of harmonics with slow
//! amplitude modulation over a quiet noise floor) with a moving striped patch
//! on a colour-gradient background under fine per-pixel sensor noise. The
//! noise and stripes give every real frame a stable high-frequency texture
//! floor, and the visual fake styles sit on both sides of it — blur strips
//! structure away while the block styles add it — so a compact description
//! of "real" is pinched from both directions along an axis the encoders
//! demonstrably learn. That is what gives a held-out style a fair shot at
//! being caught without ever being trained on. Fake material perturbs one or
//! both streams with styles that are individually learnable yet distinct
//! enough that a held-out style is a genuine generalisation test:
//!
//! * audio `tonepair` — two loud inharmonic tones added to the voice;
//! * audio `noiseband` — dense sinusoid noise in the 2.5–5 kHz band;
//! * audio `vc` — resampling plus coarse amplitude quantisation, routed
//!   through the substitution-hook path like any external voice-conversion
//!   backend would be;
//! * visual `checker` — a high-contrast 4-px checkerboard overlay;
//! * visual `pswap` — two frame blocks swapped in place, breaking the
//!   background gradient;
//! * visual `blur` — heavy box blur on every frame.
//!
//! Combined fakes pair seen styles; one pairing is reserved for test so the
//! combined test set uses seen styles in an unseen combination.
//! Unsynchronised clips are real pairs whose audio reference carries a
//! `#shift=k` fragment; their source pairs are written to the media store
//! but intentionally not listed in the corpus.

use std::path::Path;

use ndarray::{Array1, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{make_substituted_audio, make_unsynced, SubstitutionHook};
use crate::config::ToyCorpusSpec;
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, FRAME_SIDE};
use crate::media;
use crate::types::{Category, SampleRecord, Split};

const TAU: f64 = std::f64::consts::TAU;
const PATCH: usize = 24;
const HARMONICS: usize = 5;
/// The audio style that goes through [`make_substituted_audio`] instead of
/// being applied inline, so the toy corpus exercises the same derivation
/// path a real voice-conversion backend would use.
const HOOK_STYLE: &str = "vc";

/// Toy voice-conversion stand-in: time-stretch by a fixed rate, then crush
/// the amplitude to a handful of levels. Pure, so corpus builds reproduce.
pub struct ToyVcHook;

impl SubstitutionHook for ToyVcHook {
    fn tag(&self) -> &str {
        HOOK_STYLE
    }

    fn apply(&self, waveform: &Array1<f32>) -> Result<Array1<f32>> {
        if waveform.len() < 2 {
            return Err(Error::Invalid("waveform too short to warp".into()));
        }
        Ok(spectral_warp(waveform))
    }
}

/// Resample by 1.3x (reading cyclically so the output keeps its length) and
/// quantise amplitudes to steps of 0.25, leaving the waveform only a few
/// distinct levels.
pub fn spectral_warp(waveform: &Array1<f32>) -> Array1<f32> {
    let n = waveform.len();
    let span = (n - 1) as f64;
    Array1::from_iter((0..n).map(|i| {
        let p = (i as f64 * 1.3) % span;
        let j = p as usize;
        let frac = p - j as f64;
        let v = waveform[j] as f64 * (1.0 - frac) + waveform[j + 1] as f64 * frac;
        ((v * 4.0).round() / 4.0) as f32
    }))
}

/// One speaker/scene: the parameters that stay fixed across a clip.
struct Identity {
    f0: f64,
    harmonic_phase: [f64; HARMONICS],
    am_rate: f64,
    am_phase: f64,
    // Visual side: background gradient, stripe texture, patch motion.
    base: [f64; 3],
    grad_x: [f64; 3],
    grad_y: [f64; 3],
    bright: [f64; 3],
    dark: [f64; 3],
    period: usize,
    orient: u8,
    pos: (i64, i64),
    vel: (i64, i64),
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Identity {
        fn chan(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        }
        fn vel(rng: &mut ChaCha8Rng) -> i64 {
            let mag = rng.random_range(2..=6i64);
            if rng.random_range(0..2) == 0 {
                -mag
            } else {
                mag
            }
        }
        let mut harmonic_phase = [0.0; HARMONICS];
        for p in &mut harmonic_phase {
            *p = rng.random_range(0.0..TAU);
        }
        let span = (FRAME_SIDE - PATCH) as i64;
        Identity {
            f0: rng.random_range(110.0..220.0),
            harmonic_phase,
            am_rate: rng.random_range(1.5..4.0),
            am_phase: rng.random_range(0.0..TAU),
            base: chan(rng, 70.0, 150.0),
            grad_x: chan(rng, -45.0, 45.0),
            grad_y: chan(rng, -45.0, 45.0),
            bright: chan(rng, 170.0, 235.0),
            dark: chan(rng, 15.0, 80.0),
            period: rng.random_range(3..=6),
            orient: rng.random_range(0..3),
            pos: (rng.random_range(0..span), rng.random_range(0..span)),
            vel: (vel(rng), vel(rng)),
        }
    }

    fn render_audio(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Array1<f32> {
        let sr = f64::from(sample_rate);
        Array1::from_iter((0..len).map(|i| {
            let t = i as f64 / sr;
            let am = 1.0 + 0.3 * (TAU * self.am_rate * t + self.am_phase).sin();
            let mut harm = 0.0;
            for h in 0..HARMONICS {
                let f = self.f0 * (h + 1) as f64;
                harm += (TAU * f * t + self.harmonic_phase[h]).sin() / (h + 1) as f64;
            }
            let noise = rng.random_range(-0.01..0.01);
            (0.2 * am * harm + noise) as f32
        }))
    }

    fn render_frames(&self, t_frames: usize, rng: &mut ChaCha8Rng) -> Array4<u8> {
        let side = FRAME_SIDE;
        let span = (side - PATCH) as i64;
        let mut out = Array4::<u8>::zeros((t_frames, side, side, 3));
        for t in 0..t_frames {
            let px = (self.pos.0 + self.vel.0 * t as i64).rem_euclid(span) as usize;
            let py = (self.pos.1 + self.vel.1 * t as i64).rem_euclid(span) as usize;
            for y in 0..side {
                for x in 0..side {
                    let in_patch = x >= px && x < px + PATCH && y >= py && y < py + PATCH;
                    // Grayscale sensor noise, shared across channels so it
                    // reads as luminance grain rather than colour speckle.
                    let noise = rng.random_range(-12.0..12.0);
                    for c in 0..3 {
                        let v = if in_patch {
                            let u = match self.orient {
                                0 => x - px,
                                1 => y - py,
                                _ => (x - px) + (y - py),
                            };
                            if (u / self.period) % 2 == 0 {
                                self.bright[c]
                            } else {
                                self.dark[c]
                            }
                        } else {
                            self.base[c]
                                + self.grad_x[c] * (x as f64 / (side - 1) as f64 - 0.5)
                                + self.grad_y[c] * (y as f64 / (side - 1) as f64 - 0.5)
                        };
                        out[[t, y, x, c]] = (v + noise).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
        out
    }
}

/// Apply an audio fake style to a rendered real waveform.
fn styled_audio(
    style: &str,
    wave: &Array1<f32>,
    f0: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f32>> {
    let sr = f64::from(sample_rate);
    match style {
        "tonepair" => {
            let r1 = rng.random_range(2.05..2.65);
            let r2 = rng.random_range(3.25..3.85);
            let p1 = rng.random_range(0.0..TAU);
            let p2 = rng.random_range(0.0..TAU);
            Ok(Array1::from_iter(wave.iter().enumerate().map(|(i, &v)| {
                let t = i as f64 / sr;
                let extra = 0.3 * (TAU * f0 * r1 * t + p1).sin()
                    + 0.3 * (TAU * f0 * r2 * t + p2).sin();
                v + extra as f32
            })))
        }
        "noiseband" => {
            let mut freqs = [0.0; 40];
            let mut phases = [0.0; 40];
            for j in 0..40 {
                freqs[j] = rng.random_range(2500.0..5000.0);
                phases[j] = rng.random_range(0.0..TAU);
            }
            Ok(Array1::from_iter(wave.iter().enumerate().map(|(i, &v)| {
                let t = i as f64 / sr;
                let mut band = 0.0;
                for j in 0..40 {
                    band += (TAU * freqs[j] * t + phases[j]).sin();
                }
                v + (0.055 * band) as f32
            })))
        }
        HOOK_STYLE => Ok(spectral_warp(wave)),
        other => Err(Error::UnknownMethod(other.to_string())),
    }
}

/// Apply a visual fake style to rendered real frames.
fn styled_frames(style: &str, frames: &Array4<u8>) -> Result<Array4<u8>> {
    match style {
        "checker" => {
            let mut out = frames.clone();
            for ((_, y, x, _), v) in out.indexed_iter_mut() {
                let delta = if ((y / 4) + (x / 4)) % 2 == 0 { 70 } else { -70 };
                *v = (i16::from(*v) + delta).clamp(0, 255) as u8;
            }
            Ok(out)
        }
        "pswap" => {
            let mut out = frames.clone();
            let (t_frames, _, _, _) = out.dim();
            const A: usize = 18;
            const B: usize = 56;
            const SIDE: usize = 26;
            for t in 0..t_frames {
                for dy in 0..SIDE {
                    for dx in 0..SIDE {
                        for c in 0..3 {
                            let a = [t, A + dy, A + dx, c];
                            let b = [t, B + dy, B + dx, c];
                            let tmp = out[a];
                            out[a] = out[b];
                            out[b] = tmp;
                        }
                    }
                }
            }
            Ok(out)
        }
        "blur" => Ok(box_blur(frames, 7)),
        other => Err(Error::UnknownMethod(other.to_string())),
    }
}

/// Separable box blur with edge truncation, per frame and channel.
fn box_blur(frames: &Array4<u8>, radius: usize) -> Array4<u8> {
    let (t_frames, h, w, ch) = frames.dim();
    let mut tmp = ndarray::Array4::<f32>::zeros((t_frames, h, w, ch));
    for t in 0..t_frames {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                for c in 0..ch {
                    let mut acc = 0.0;
                    for xx in lo..=hi {
                        acc += f32::from(frames[[t, y, xx, c]]);
                    }
                    tmp[[t, y, x, c]] = acc / (hi - lo + 1) as f32;
                }
            }
        }
    }
    let mut out = Array4::<u8>::zeros((t_frames, h, w, ch));
    for t in 0..t_frames {
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for yy in lo..=hi {
                        acc += tmp[[t, yy, x, c]];
                    }
                    out[[t, y, x, c]] =
                        (acc / (hi - lo + 1) as f32).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

/// Style pairings used for combined fakes, in round-robin order. Seen audio
/// and visual styles are paired diagonally; the final entry re-pairs them
/// into a combination that never appears with any other index, reserved for
/// the combined-fake test set.
fn fafv_combos(spec: &ToyCorpusSpec) -> Vec<(String, String)> {
    let a = spec.seen_audio_styles();
    let v = spec.seen_visual_styles();
    let d = a.len().min(v.len());
    let mut combos: Vec<(String, String)> = (0..d)
        .map(|i| (a[i].to_string(), v[i].to_string()))
        .collect();
    combos.push((a[0].to_string(), v[d - 1].to_string()));
    combos
}

/// The generation-method tags a splitter should hold out for this corpus:
/// the configured holdout styles, the reserved combined-style pairing, and
/// the desynchronisation shift.
pub fn toy_holdout_methods(spec: &ToyCorpusSpec) -> Vec<String> {
    let combos = fafv_combos(spec);
    let (a, v) = combos.last().expect("combos never empty");
    let mut out = spec.holdout_styles.clone();
    out.push(format!("{a}+{v}"));
    out.push("shift".to_string());
    out
}

fn write_pair(
    media_dir: &Path,
    id: &str,
    wave: &Array1<f32>,
    frames: &Array4<u8>,
) -> Result<(String, String)> {
    let audio_ref = format!("audio/{id}.arr");
    let visual_ref = format!("video/{id}.arr");
    media::save_f32(&media_dir.join(&audio_ref), wave.view().into_dyn())?;
    media::save_u8(&media_dir.join(&visual_ref), frames.view().into_dyn())?;
    Ok((audio_ref, visual_ref))
}

fn record(
    id: String,
    refs: (String, String),
    category: Category,
    gen_method: &str,
) -> SampleRecord {
    let (audio_label, visual_label, av_label, synced) = match category {
        Category::Rarv => (0, 0, 0, true),
        Category::Farv => (1, 0, 1, true),
        Category::Rafv => (0, 1, 1, true),
        Category::Fafv => (1, 1, 1, true),
        Category::Unsynced => (0, 0, 1, false),
    };
    SampleRecord {
        sample_id: id,
        audio_ref: refs.0,
        visual_ref: refs.1,
        audio_label,
        visual_label,
        av_label,
        synced,
        category,
        gen_method: gen_method.to_string(),
        split: Split::Train,
    }
}

/// Generate the full five-category corpus under `media_dir` and return its
/// records (split fields are placeholders for [`super::build_split`]).
///
/// Generation is fully determined by `spec.seed`: rerunning with equal
/// arguments writes byte-identical media. Unsynchronised and
/// voice-conversion records are derived through [`make_unsynced`] and
/// [`make_substituted_audio`] from hidden real source pairs whose media
/// live in the store without being listed.
pub fn generate_toy_corpus(
    spec: &ToyCorpusSpec,
    fe: &FrontendConfig,
    media_dir: &Path,
) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    fe.validate()?;
    let n = spec.n_per_category;
    let wave_len = fe.min_waveform_len();
    let t_frames = fe.clip_frames;
    let sr = fe.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();

    // Real pairs.
    for i in 0..n {
        let identity = Identity::sample(&mut rng);
        let wave = identity.render_audio(wave_len, sr, &mut rng);
        let frames = identity.render_frames(t_frames, &mut rng);
        let id = format!("rarv_{i:04}");
        let refs = write_pair(media_dir, &id, &wave, &frames)?;
        records.push(record(id, refs, Category::Rarv, "none"));
    }

    // Fake audio over real visual. The hook style's sources are written but
    // not listed; their records come back from the substitution pass below.
    let mut hook_sources = Vec::new();
    for i in 0..n {
        let style = &spec.audio_fake_styles[i % spec.audio_fake_styles.len()];
        let identity = Identity::sample(&mut rng);
        let wave = identity.render_audio(wave_len, sr, &mut rng);
        let frames = identity.render_frames(t_frames, &mut rng);
        if style == HOOK_STYLE {
            let id = format!("farvsrc_{HOOK_STYLE}_{i:04}");
            let refs = write_pair(media_dir, &id, &wave, &frames)?;
            hook_sources.push(record(id, refs, Category::Rarv, "none"));
        } else {
            let styled = styled_audio(style, &wave, identity.f0, sr, &mut rng)?;
            let id = format!("farv_{style}_{i:04}");
            let refs = write_pair(media_dir, &id, &styled, &frames)?;
            records.push(record(id, refs, Category::Farv, style));
        }
    }
    if !hook_sources.is_empty() {
        records.extend(make_substituted_audio(
            &hook_sources,
            &ToyVcHook,
            hook_sources.len(),
            spec.seed.wrapping_add(202),
            media_dir,
        )?);
    }

    // Fake visual over real audio.
    for i in 0..n {
        let style = &spec.visual_fake_styles[i % spec.visual_fake_styles.len()];
        let identity = Identity::sample(&mut rng);
        let wave = identity.render_audio(wave_len, sr, &mut rng);
        let frames = styled_frames(style, &identity.render_frames(t_frames, &mut rng))?;
        let id = format!("rafv_{style}_{i:04}");
        let refs = write_pair(media_dir, &id, &wave, &frames)?;
        records.push(record(id, refs, Category::Rafv, style));
    }

    // Combined fakes.
    let combos = fafv_combos(spec);
    for i in 0..n {
        let (a_style, v_style) = &combos[i % combos.len()];
        let identity = Identity::sample(&mut rng);
        let wave = identity.render_audio(wave_len, sr, &mut rng);
        let styled_wave = styled_audio(a_style, &wave, identity.f0, sr, &mut rng)?;
        let frames = styled_frames(v_style, &identity.render_frames(t_frames, &mut rng))?;
        let tag = format!("{a_style}+{v_style}");
        let id = format!("fafv_{tag}_{i:04}");
        let refs = write_pair(media_dir, &id, &styled_wave, &frames)?;
        records.push(record(id, refs, Category::Fafv, &tag));
    }

    // Desynchronised real pairs, derived from hidden sources.
    let n_unsynced = n.div_ceil(3);
    let mut shift_sources = Vec::new();
    for i in 0..n_unsynced {
        let identity = Identity::sample(&mut rng);
        let wave = identity.render_audio(wave_len, sr, &mut rng);
        let frames = identity.render_frames(t_frames, &mut rng);
        let id = format!("unsyncedsrc_{i:04}");
        let refs = write_pair(media_dir, &id, &wave, &frames)?;
        shift_sources.push(record(id, refs, Category::Rarv, "none"));
    }
    records.extend(make_unsynced(
        &shift_sources,
        n_unsynced,
        fe.audio_frames(),
        spec.seed.wrapping_add(101),
    )?);

    Ok(records)
}

//! Signal frontend: waveform → MFCC rows, raw frames → scaled tensors, plus
//! the cyclic audio shift that realizes unsynchronized clips.
//!
//! The audio frame rate (default 100 fps: 25 ms window, 10 ms hop) is pinned
//! to four times the visual frame rate (default 25 fps), so an aligned clip
//! always satisfies `Ta = 4 * T`.

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output spatial side of every prepared frame.
pub const FRAME_SIDE: usize = 100;

/// Pre-emphasis coefficient for the MFCC pipeline (standard speech value).
const PRE_EMPHASIS: f64 = 0.97;

/// Floor applied before the log of mel energies; keeps silent frames finite.
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub visual_fps: u32,
    /// T: visual frames per clip. Aligned audio has `4 * clip_frames` rows.
    pub clip_frames: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            window_ms: 25,
            hop_ms: 10,
            n_mfcc: 13,
            n_mels: 40,
            visual_fps: 25,
            clip_frames: 25,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_ms == 0 || self.window_ms == 0 || self.sample_rate == 0 {
            return Err(Error::Config("frontend timings must be positive".into()));
        }
        // 1000 / hop_ms = 4 * visual_fps, kept in integer arithmetic.
        if self.hop_ms * 4 * self.visual_fps != 1000 {
            return Err(Error::Config(format!(
                "audio frame rate (hop {} ms) must be 4x the visual rate ({} fps)",
                self.hop_ms, self.visual_fps
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "n_mfcc {} must be in 1..={}",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.clip_frames == 0 {
            return Err(Error::Config("clip_frames must be positive".into()));
        }
        if self.window_samples() < 2 {
            return Err(Error::Config("analysis window shorter than 2 samples".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// Ta of an aligned clip.
    pub fn audio_frames(&self) -> usize {
        4 * self.clip_frames
    }

    /// Samples needed so the raw extraction yields at least `audio_frames()`
    /// rows: window + (Ta − 1) · hop.
    pub fn min_waveform_len(&self) -> usize {
        self.window_samples() + (self.audio_frames() - 1) * self.hop_samples()
    }
}

/// Standard MFCC pipeline: pre-emphasis, Hamming window, FFT power spectrum,
/// mel filterbank, log, DCT-II. Row count is `floor((len − window)/hop) + 1`.
///
/// Internals run in f64 with fixed-order accumulation, so identical input and
/// config produce bit-identical output.
pub fn extract_mfcc(waveform: &[f32], cfg: &FrontendConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if waveform.len() < win {
        return Err(Error::Invalid(format!(
            "waveform has {} samples; one analysis window needs {win}",
            waveform.len()
        )));
    }
    if waveform.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("input waveform".into()));
    }

    let n_frames = (waveform.len() - win) / hop + 1;
    let fft_size = win.next_power_of_two();
    let n_bins = fft_size / 2 + 1;

    // y[t] = x[t] − 0.97 · x[t−1]
    let mut emphasized = Vec::with_capacity(waveform.len());
    emphasized.push(waveform[0] as f64);
    for t in 1..waveform.len() {
        emphasized.push(waveform[t] as f64 - PRE_EMPHASIS * waveform[t - 1] as f64);
    }

    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();

    let filterbank = mel_filterbank(cfg.n_mels, fft_size, cfg.sample_rate as f64);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut out = Array2::<f32>::zeros((n_frames, cfg.n_mfcc));
    let mut buffer = vec![Complex::new(0.0, 0.0); fft_size];
    let mut log_mel = vec![0.0f64; cfg.n_mels];

    for (fi, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = fi * hop;
        for (i, slot) in buffer.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(emphasized[start + i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buffer);

        for (m, filter) in filterbank.iter().enumerate() {
            let mut energy = 0.0f64;
            for &(bin, weight) in filter {
                energy += weight * buffer[bin].norm_sqr();
            }
            let _ = n_bins; // bins beyond Nyquist never enter a filter
            log_mel[m] = energy.max(LOG_FLOOR).ln();
        }

        // Orthonormal DCT-II over the mel axis.
        let n = cfg.n_mels as f64;
        for (j, slot) in row.iter_mut().enumerate() {
            let scale = if j == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let mut acc = 0.0f64;
            for (m, &lm) in log_mel.iter().enumerate() {
                acc += lm
                    * (std::f64::consts::PI * j as f64 * (2.0 * m as f64 + 1.0) / (2.0 * n)).cos();
            }
            *slot = (scale * acc) as f32;
        }
    }

    Ok(out)
}

/// Triangular mel filters as sparse (bin, weight) lists covering 0..Nyquist.
fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let hz_to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let mel_to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);

    let max_mel = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let to_bin = |hz: f64| hz * fft_size as f64 / sample_rate;

    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (to_bin(points[m]), to_bin(points[m + 1]), to_bin(points[m + 2]));
            let mut filter = Vec::new();
            let first = lo.ceil() as usize;
            let last = (hi.floor() as usize).min(fft_size / 2);
            for bin in first..=last {
                let b = bin as f64;
                let w = if b <= center {
                    (b - lo) / (center - lo)
                } else {
                    (hi - b) / (hi - center)
                };
                if w > 0.0 {
                    filter.push((bin, w));
                }
            }
            filter
        })
        .collect()
}

/// Per-clip, per-coefficient mean/variance normalization. Keeps the encoder
/// input well-scaled without any dataset-level statistics; a cyclic row shift
/// commutes with this exactly (the per-column moments are shift-invariant).
pub fn normalize_clip(mfcc: &mut Array2<f32>) {
    let n = mfcc.shape()[0] as f64;
    if n == 0.0 {
        return;
    }
    for mut col in mfcc.axis_iter_mut(Axis(1)) {
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / var.sqrt().max(1e-8);
        for v in col.iter_mut() {
            *v = ((*v as f64 - mean) * inv_std) as f32;
        }
    }
}

/// Selects the center T frames, resizes each to 100x100 (bilinear), and lays
/// the result out channels-first with values in [0, 1].
pub fn prepare_frames(frames: &ArrayView4<u8>, cfg: &FrontendConfig) -> Result<Array4<f32>> {
    let t = cfg.clip_frames;
    let (n, h, w, c) = {
        let s = frames.shape();
        (s[0], s[1], s[2], s[3])
    };
    if c != 3 {
        return Err(Error::Shape {
            expected: "frames with 3 channels".into(),
            got: format!("{c} channels"),
        });
    }
    if n < t {
        return Err(Error::Invalid(format!(
            "clip has {n} frames; need at least T={t}"
        )));
    }
    let offset = (n - t) / 2;

    let mut out = Array4::<f32>::zeros((t, 3, FRAME_SIDE, FRAME_SIDE));
    // Half-pixel-center bilinear sampling; reduces to the identity when the
    // source is already 100x100.
    let sy_of = |oy: usize| ((oy as f64 + 0.5) * h as f64 / FRAME_SIDE as f64 - 0.5).max(0.0);
    let sx_of = |ox: usize| ((ox as f64 + 0.5) * w as f64 / FRAME_SIDE as f64 - 0.5).max(0.0);

    for ti in 0..t {
        let src = frames.index_axis(Axis(0), offset + ti);
        for oy in 0..FRAME_SIDE {
            let sy = sy_of(oy);
            let y0 = (sy as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..FRAME_SIDE {
                let sx = sx_of(ox);
                let x0 = (sx as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                for ch in 0..3 {
                    let p00 = src[[y0, x0, ch]] as f64;
                    let p01 = src[[y0, x1, ch]] as f64;
                    let p10 = src[[y1, x0, ch]] as f64;
                    let p11 = src[[y1, x1, ch]] as f64;
                    let v = p00 * (1.0 - fy) * (1.0 - fx)
                        + p01 * (1.0 - fy) * fx
                        + p10 * fy * (1.0 - fx)
                        + p11 * fy * fx;
                    out[[ti, ch, oy, ox]] = (v / 255.0) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Cyclic shift along time: output row `t` is input row `(t − k) mod Ta`.
/// A pure row permutation — shape and value multiset are untouched, so the
/// only cue left in a shifted clip is the audio-visual misalignment.
pub fn desync_shift(features: &Array2<f32>, shift_frames: usize) -> Result<Array2<f32>> {
    let ta = features.shape()[0];
    if shift_frames == 0 || shift_frames >= ta {
        return Err(Error::Invalid(format!(
            "shift {shift_frames} out of range (need 0 < k < {ta})"
        )));
    }
    let mut out = Array2::<f32>::zeros(features.raw_dim());
    for t in 0..ta {
        let src = (t + ta - shift_frames) % ta;
        out.row_mut(t).assign(&features.row(src));
    }
    Ok(out)
}

/// Trims both streams to an aligned `(4T, T)` pair: the center T visual
/// frames are selected, and the matching audio window is cut from the MFCC
/// rows, repeating the final row if the audio runs short.
pub fn align_pair(
    audio_features: &Array2<f32>,
    visual_frames: &Array4<f32>,
    cfg: &FrontendConfig,
) -> Result<(Array2<f32>, Array4<f32>)> {
    let t = cfg.clip_frames;
    let ta = cfg.audio_frames();
    let n_audio = audio_features.shape()[0];
    let n_visual = visual_frames.shape()[0];
    if n_audio == 0 {
        return Err(Error::Invalid("audio stream has no frames".into()));
    }
    if n_visual < t {
        return Err(Error::Invalid(format!(
            "visual stream has {n_visual} frames; need at least T={t}"
        )));
    }

    let v_offset = (n_visual - t) / 2;
    let visual = visual_frames
        .slice(ndarray::s![v_offset..v_offset + t, .., .., ..])
        .to_owned();

    let a_start = 4 * v_offset;
    let mut audio = Array2::<f32>::zeros((ta, audio_features.shape()[1]));
    for i in 0..ta {
        let src = (a_start + i).min(n_audio - 1);
        audio.row_mut(i).assign(&audio_features.row(src));
    }

    Ok((audio, visual))
}

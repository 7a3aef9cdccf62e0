//! C ABI over the detector: load a trained checkpoint, score decoded clips,
//! and fuse externally computed branch scores.
//!
//! Conventions, mirrored in the generated `msoc.h`:
//!
//! * Every fallible call returns an [`MsocStatus`]; `MSOC_STATUS_OK` is zero.
//! * On failure, a thread-local message describes the cause; fetch it with
//!   [`msoc_last_error`]. The message is only meaningful immediately after a
//!   failing call on the same thread.
//! * The detector handle is opaque. Create with [`msoc_detector_load`], free
//!   with [`msoc_detector_free`]; the handle must not be shared across
//!   threads without external synchronisation (scoring takes `&mut` state in
//!   no way, but the error channel is thread-local).
//! * Panics never unwind across the boundary; they surface as
//!   `MSOC_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array3, Array5, ArrayView4, Axis};

use msoc::config::Mode;
use msoc::frontend::{extract_mfcc, normalize_clip, prepare_frames, FrontendConfig};
use msoc::model::{fuse_one, MSOCModel};
use msoc::types::ClipBatch;

/// Result of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsocStatus {
    /// Success.
    MsocStatusOk = 0,
    /// A required pointer argument was null.
    MsocStatusNullArgument = 1,
    /// An argument failed validation (shape, length, encoding, range).
    MsocStatusInvalidArgument = 2,
    /// The checkpoint could not be read or decoded.
    MsocStatusLoadFailed = 3,
    /// The forward pass rejected the clip.
    MsocStatusScoreFailed = 4,
    /// An internal invariant failed; the message has details.
    MsocStatusInternal = 5,
}

use MsocStatus::*;

/// Per-clip verdict and the scores behind it.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MsocDecision {
    /// Audio-branch cosine score in `[-1, 1]`; higher reads more real.
    pub audio_score: f32,
    /// Visual-branch cosine score in `[-1, 1]`; higher reads more real.
    pub visual_score: f32,
    /// Audio-visual branch probability that the clip is real, in `[0, 1]`.
    pub av_real_prob: f32,
    /// Fused score in `[0, 1]`; the verdict thresholds this at 0.5.
    pub fused_score: f32,
    /// 0 = real, 1 = fake.
    pub verdict: c_int,
}

/// Opaque detector: a trained model plus its feature-extraction settings.
pub struct MsocDetector {
    model: MSOCModel,
    frontend: FrontendConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // Interior NULs cannot come from our error types, but never panic here.
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap_or_default());
}

fn fail(status: MsocStatus, msg: &str) -> MsocStatus {
    set_error(msg);
    status
}

/// Run a fallible body, translating panics into `MSOC_STATUS_INTERNAL`.
fn guarded(body: impl FnOnce() -> MsocStatus) -> MsocStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(MsocStatusInternal, &msg)
        }
    }
}

/// Copies the most recent error message into `buf` as a NUL-terminated
/// string, truncating if needed, and returns the full length of the message
/// including the terminator. Call with a null `buf` or zero `cap` to size a
/// buffer first.
#[no_mangle]
pub extern "C" fn msoc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            // SAFETY: caller promises `buf` points at `cap` writable bytes.
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                // Guarantee termination even when truncated.
                *buf.add(n - 1) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msoc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a detector from a checkpoint written by the trainer.
///
/// The feature-extraction settings start at the library defaults (16 kHz
/// audio, 25-frame clips); adjust with [`msoc_detector_set_clip_frames`] to
/// match the configuration the checkpoint was trained with.
#[no_mangle]
pub extern "C" fn msoc_detector_load(
    path: *const c_char,
    out: *mut *mut MsocDetector,
) -> MsocStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(MsocStatusNullArgument, "path and out must be non-null");
        }
        // SAFETY: caller promises `path` is a NUL-terminated string.
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(MsocStatusInvalidArgument, "path is not valid UTF-8"),
        };
        match MSOCModel::load(Path::new(path)) {
            Ok((model, _config_hash)) => {
                let handle = Box::new(MsocDetector {
                    model,
                    frontend: FrontendConfig::default(),
                });
                // SAFETY: `out` is non-null per the check above.
                unsafe { *out = Box::into_raw(handle) };
                MsocStatusOk
            }
            Err(e) => fail(MsocStatusLoadFailed, &e.to_string()),
        }
    })
}

/// Frees a detector. Passing null is a no-op.
#[no_mangle]
pub extern "C" fn msoc_detector_free(detector: *mut MsocDetector) {
    if !detector.is_null() {
        // SAFETY: the pointer came from `msoc_detector_load` and is not used
        // again after this call, per the API contract.
        drop(unsafe { Box::from_raw(detector) });
    }
}

/// Sets the number of video frames consumed per clip (and with it the
/// number of audio feature frames, which is fixed at four per video frame).
/// Must match the configuration the checkpoint was trained with.
#[no_mangle]
pub extern "C" fn msoc_detector_set_clip_frames(
    detector: *mut MsocDetector,
    clip_frames: usize,
) -> MsocStatus {
    guarded(|| {
        let Some(d) = (unsafe { detector.as_mut() }) else {
            return fail(MsocStatusNullArgument, "detector must be non-null");
        };
        let mut fe = d.frontend.clone();
        fe.clip_frames = clip_frames;
        match fe.validate() {
            Ok(()) => {
                d.frontend = fe;
                MsocStatusOk
            }
            Err(e) => fail(MsocStatusInvalidArgument, &e.to_string()),
        }
    })
}

/// Minimum number of waveform samples [`msoc_detector_score`] needs.
#[no_mangle]
pub extern "C" fn msoc_detector_min_waveform_len(detector: *const MsocDetector) -> usize {
    // SAFETY: null is tolerated and reported as zero.
    unsafe { detector.as_ref() }.map_or(0, |d| d.frontend.min_waveform_len())
}

/// Number of video frames consumed per clip.
#[no_mangle]
pub extern "C" fn msoc_detector_clip_frames(detector: *const MsocDetector) -> usize {
    // SAFETY: null is tolerated and reported as zero.
    unsafe { detector.as_ref() }.map_or(0, |d| d.frontend.clip_frames)
}

/// Scores one decoded clip.
///
/// `wave` holds `wave_len` mono samples at the configured sample rate (16 kHz
/// by default). `frames` holds `n_frames` RGB images in row-major
/// `[frame][row][column][channel]` order, `height * width * 3` bytes each;
/// any resolution is accepted and resampled internally. The clip must supply
/// at least the configured number of frames and the matching amount of audio;
/// surplus at the end is ignored.
#[no_mangle]
pub extern "C" fn msoc_detector_score(
    detector: *const MsocDetector,
    wave: *const f32,
    wave_len: usize,
    frames: *const u8,
    n_frames: usize,
    height: usize,
    width: usize,
    out: *mut MsocDecision,
) -> MsocStatus {
    guarded(|| {
        let Some(d) = (unsafe { detector.as_ref() }) else {
            return fail(MsocStatusNullArgument, "detector must be non-null");
        };
        if wave.is_null() || frames.is_null() || out.is_null() {
            return fail(MsocStatusNullArgument, "wave, frames, and out must be non-null");
        }
        if wave_len == 0 || n_frames == 0 || height == 0 || width == 0 {
            return fail(MsocStatusInvalidArgument, "clip dimensions must be positive");
        }
        // SAFETY: caller promises the buffers hold the stated element counts.
        let wave = unsafe { std::slice::from_raw_parts(wave, wave_len) };
        let pixels = unsafe { std::slice::from_raw_parts(frames, n_frames * height * width * 3) };

        match score_clip(d, wave, pixels, n_frames, height, width) {
            Ok(decision) => {
                // SAFETY: `out` is non-null per the check above.
                unsafe { *out = decision };
                MsocStatusOk
            }
            Err(e) => fail(MsocStatusScoreFailed, &e.to_string()),
        }
    })
}

/// The scoring pipeline proper, in safe code: replicate the preprocessing the
/// trainer applied (feature extraction, per-clip normalisation, truncation to
/// the configured clip length), then run the forward pass and fuse.
fn score_clip(
    d: &MsocDetector,
    wave: &[f32],
    pixels: &[u8],
    n_frames: usize,
    height: usize,
    width: usize,
) -> msoc::Result<MsocDecision> {
    let fe = &d.frontend;
    let mut feats = extract_mfcc(wave, fe)?;
    normalize_clip(&mut feats);
    let ta = fe.audio_frames();
    if feats.shape()[0] < ta {
        return Err(msoc::Error::Invalid(format!(
            "waveform yields {} feature frames, need {ta}",
            feats.shape()[0]
        )));
    }
    let t = fe.clip_frames;
    if n_frames < t {
        return Err(msoc::Error::Invalid(format!(
            "clip has {n_frames} frames, need {t}"
        )));
    }
    let raw = ArrayView4::from_shape((n_frames, height, width, 3), pixels)
        .map_err(|e| msoc::Error::Invalid(format!("frame buffer: {e}")))?;
    let first_t = raw.slice_move(ndarray::s![..t, .., .., ..]);
    let visual = prepare_frames(&first_t, fe)?;

    let audio: Array3<f32> = feats
        .slice_move(ndarray::s![..ta, ..])
        .insert_axis(Axis(0));
    let visual: Array5<f32> = visual.insert_axis(Axis(0));
    let zeros = ndarray::Array1::<u8>::zeros(1);
    let batch = ClipBatch::new(audio, visual, zeros.clone(), zeros.clone(), zeros)?;

    let outputs = d.model.forward(&batch)?;
    let decision = fuse_one(
        outputs.audio_oc_score[0],
        outputs.visual_oc_score[0],
        outputs.av_real_prob[0],
    );
    let verdict = match d.model.mode {
        Mode::Msoc => decision.verdict,
        Mode::Avoc => u8::from(outputs.av_real_prob[0] <= 0.5),
    };
    Ok(MsocDecision {
        audio_score: outputs.audio_oc_score[0],
        visual_score: outputs.visual_oc_score[0],
        av_real_prob: outputs.av_real_prob[0],
        fused_score: decision.fused_score,
        verdict: c_int::from(verdict),
    })
}

/// Applies the fusion rule to branch scores computed elsewhere: binarise the
/// two cosine scores at 0.5, average them with the real probability, and
/// call the clip real only when the result clears 0.5.
#[no_mangle]
pub extern "C" fn msoc_fuse(
    audio_score: f32,
    visual_score: f32,
    av_real_prob: f32,
    out: *mut MsocDecision,
) -> MsocStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MsocStatusNullArgument, "out must be non-null");
        }
        if !(audio_score.is_finite() && visual_score.is_finite() && av_real_prob.is_finite()) {
            return fail(MsocStatusInvalidArgument, "scores must be finite");
        }
        if !(-1.0..=1.0).contains(&audio_score) || !(-1.0..=1.0).contains(&visual_score) {
            return fail(
                MsocStatusInvalidArgument,
                "cosine scores must lie in [-1, 1]",
            );
        }
        if !(0.0..=1.0).contains(&av_real_prob) {
            return fail(MsocStatusInvalidArgument, "av_real_prob must lie in [0, 1]");
        }
        let d = fuse_one(audio_score, visual_score, av_real_prob);
        // SAFETY: `out` is non-null per the check above.
        unsafe {
            *out = MsocDecision {
                audio_score,
                visual_score,
                av_real_prob,
                fused_score: d.fused_score,
                verdict: c_int::from(d.verdict),
            };
        }
        MsocStatusOk
    })
}

/* C interface to the msoc audio-visual deepfake detector. */

#ifndef MSOC_H
#define MSOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible API call.
typedef enum MsocStatus {
  // Success.
  MSOC_STATUS_OK = 0,
  // A required pointer argument was null.
  MSOC_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation (shape, length, encoding, range).
  MSOC_STATUS_INVALID_ARGUMENT = 2,
  // The checkpoint could not be read or decoded.
  MSOC_STATUS_LOAD_FAILED = 3,
  // The forward pass rejected the clip.
  MSOC_STATUS_SCORE_FAILED = 4,
  // An internal invariant failed; the message has details.
  MSOC_STATUS_INTERNAL = 5,
} MsocStatus;

// Opaque detector: a trained model plus its feature-extraction settings.
typedef struct MsocDetector MsocDetector;

// Per-clip verdict and the scores behind it.
typedef struct MsocDecision {
  // Audio-branch cosine score in `[-1, 1]`; higher reads more real.
  float audio_score;
  // Visual-branch cosine score in `[-1, 1]`; higher reads more real.
  float visual_score;
  // Audio-visual branch probability that the clip is real, in `[0, 1]`.
  float av_real_prob;
  // Fused score in `[0, 1]`; the verdict thresholds this at 0.5.
  float fused_score;
  // 0 = real, 1 = fake.
  int verdict;
} MsocDecision;

// Copies the most recent error message into `buf` as a NUL-terminated
// string, truncating if needed, and returns the full length of the message
// including the terminator. Call with a null `buf` or zero `cap` to size a
// buffer first.
size_t msoc_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *msoc_version(void);

// Loads a detector from a checkpoint written by the trainer.
//
// The feature-extraction settings start at the library defaults (16 kHz
// audio, 25-frame clips); adjust with [`msoc_detector_set_clip_frames`] to
// match the configuration the checkpoint was trained with.
enum MsocStatus msoc_detector_load(const char *path, struct MsocDetector **out);

// Frees a detector. Passing null is a no-op.
void msoc_detector_free(struct MsocDetector *detector);

// Sets the number of video frames consumed per clip (and with it the
// number of audio feature frames, which is fixed at four per video frame).
// Must match the configuration the checkpoint was trained with.
enum MsocStatus msoc_detector_set_clip_frames(struct MsocDetector *detector, size_t clip_frames);

// Minimum number of waveform samples [`msoc_detector_score`] needs.
size_t msoc_detector_min_waveform_len(const struct MsocDetector *detector);

// Number of video frames consumed per clip.
size_t msoc_detector_clip_frames(const struct MsocDetector *detector);

// Scores one decoded clip.
//
// `wave` holds `wave_len` mono samples at the configured sample rate (16 kHz
// by default). `frames` holds `n_frames` RGB images in row-major
// `[frame][row][column][channel]` order, `height * width * 3` bytes each;
// any resolution is accepted and resampled internally. The clip must supply
// at least the configured number of frames and the matching amount of audio;
// surplus at the end is ignored.
enum MsocStatus msoc_detector_score(const struct MsocDetector *detector,
                                    const float *wave,
                                    size_t wave_len,
                                    const uint8_t *frames,
                                    size_t n_frames,
                                    size_t height,
                                    size_t width,
                                    struct MsocDecision *out);

// Applies the fusion rule to branch scores computed elsewhere: binarise the
// two cosine scores at 0.5, average them with the real probability, and
// call the clip real only when the result clears 0.5.
enum MsocStatus msoc_fuse(float audio_score,
                          float visual_score,
                          float av_real_prob,
                          struct MsocDecision *out);

#endif  /* MSOC_H */

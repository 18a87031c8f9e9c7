#ifndef FQA_H
#define FQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FqaStatus {
  FQA_STATUS_OK = 0,
  FQA_STATUS_NULL_POINTER = 1,
  FQA_STATUS_INVALID_ARGUMENT = 2,
  FQA_STATUS_IO = 3,
  FQA_STATUS_ARCHIVE = 4,
  FQA_STATUS_UNDEFINED = 5,
  FQA_STATUS_INTERNAL = 6,
} FqaStatus;

/**
 * Landmark network plus the quality head used for scoring.
 */
typedef struct FqaModel FqaModel;

typedef struct FqaTracker FqaTracker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a success.
 * The pointer stays valid until the next fqa call on the same thread.
 */
const char *fqa_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fqa_version(void);

/**
 * Pearson correlation of two length-`n` arrays.
 *
 * # Safety
 * `x` and `y` must point to `n` readable doubles; `out_r` must be writable.
 */
enum FqaStatus fqa_pearson(const double *x, const double *y, size_t n, double *out_r);

/**
 * Cosine similarity of two length-`n` vectors (normalized internally).
 *
 * # Safety
 * `a` and `b` must point to `n` readable doubles; `out` must be writable.
 */
enum FqaStatus fqa_cosine_similarity(const double *a, const double *b, size_t n, double *out);

/**
 * Load a model archive. `variant` selects a named quality head ("BRO", "Blur", ...);
 * null selects the default head, falling back to a zero head.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `variant` null or NUL-terminated,
 * `out` writable. The handle must be released with `fqa_model_free`.
 */
enum FqaStatus fqa_model_load(const char *path, const char *variant, struct FqaModel **out);

/**
 * Randomly initialized extractor with a zero quality head, for testing.
 *
 * # Safety
 * `out` must be writable. Release with `fqa_model_free`.
 */
enum FqaStatus fqa_model_random(uint64_t seed, struct FqaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `fqa_model_load`/`fqa_model_random`
 * that has not been freed.
 */
void fqa_model_free(struct FqaModel *model);

/**
 * Score one face crop given as tightly packed RGB8 rows.
 * Writes five landmarks as x0,y0,...,x4,y4 in crop pixels and the quality score.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` bytes, `out_landmarks` to 10
 * writable doubles, `out_quality` must be writable.
 */
enum FqaStatus fqa_model_predict(const struct FqaModel *model,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 double *out_landmarks,
                                 double *out_quality);

/**
 * # Safety
 * `out` must be writable. Release with `fqa_tracker_free`.
 */
enum FqaStatus fqa_tracker_new(double iou_threshold,
                               uint32_t max_misses,
                               double min_confidence,
                               struct FqaTracker **out);

/**
 * # Safety
 * `tracker` must be null or an unfreed handle from `fqa_tracker_new`.
 */
void fqa_tracker_free(struct FqaTracker *tracker);

/**
 * Feed one frame of detections. `boxes` holds x,y,w,h for each of the `n`
 * detections; `confidences` may be null (all 1.0). `out_ids[i]` receives the
 * track id of detection i, or -1 if it was rejected by the confidence gate.
 * Frames must be strictly increasing.
 *
 * # Safety
 * `boxes` must point to `4 * n` doubles, `confidences` to `n` doubles or be
 * null, and `out_ids` to `n` writable int64 values.
 */
enum FqaStatus fqa_tracker_update(struct FqaTracker *tracker,
                                  uint64_t frame,
                                  const double *boxes,
                                  const double *confidences,
                                  size_t n,
                                  int64_t *out_ids);

/**
 * Number of tracks currently alive (active or lost, not terminated).
 *
 * # Safety
 * `tracker` must be null or an unfreed handle.
 */
size_t fqa_tracker_live_count(const struct FqaTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FQA_H */

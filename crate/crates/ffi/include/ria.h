/* SPDX-License-Identifier: Apache-2.0 */

#ifndef RIA_H
#define RIA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum RiaStatus {
  RIA_STATUS_OK = 0,
  RIA_STATUS_NULL_POINTER = 1,
  RIA_STATUS_INVALID_ARGUMENT = 2,
  RIA_STATUS_CONFIG = 3,
  RIA_STATUS_DATA = 4,
  RIA_STATUS_STALE_CACHE = 5,
  RIA_STATUS_CHECKPOINT = 6,
  RIA_STATUS_IO = 7,
  RIA_STATUS_NOT_FOUND = 8,
  RIA_STATUS_PANIC = 9,
} RiaStatus;

// A detection cache checked against a detector's fingerprint.
typedef struct RiaCache RiaCache;

// A configured object detector.
typedef struct RiaDetector RiaDetector;

// A loaded classifier.
typedef struct RiaModel RiaModel;

// Inclusive pixel box.
typedef struct RiaBox {
  uint32_t x_min;
  uint32_t y_min;
  uint32_t x_max;
  uint32_t y_max;
} RiaBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *ria_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ria_version(void);

// Intersection over union of two boxes.
//
// # Safety
// Pointers must be valid or null.
enum RiaStatus ria_iou(const struct RiaBox *a, const struct RiaBox *b, double *out);

// Intersection area divided by the area of `b_gc`.
//
// # Safety
// Pointers must be valid or null.
enum RiaStatus ria_iou_hat(const struct RiaBox *b_od, const struct RiaBox *b_gc, double *out);

// Hard RIA loss `1 - iou_hat + lambda * diagonal / image_diagonal` for a
// `width × height` image.
//
// # Safety
// Pointers must be valid or null.
enum RiaStatus ria_ria_hard(const struct RiaBox *b_od,
                            const struct RiaBox *b_gc,
                            double lambda,
                            size_t width,
                            size_t height,
                            double *out);

// Relative foreground sensitivity `a_bg - a_fg`; both accuracies must lie in `[0, 1]`.
//
// # Safety
// `out` must be valid or null.
enum RiaStatus ria_rfs(double a_bg, double a_fg, double *out);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid or null.
enum RiaStatus ria_model_load(const char *path, struct RiaModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`ria_model_load`] and not be used afterwards.
void ria_model_free(struct RiaModel *model);

// Number of classes and square input side length of a model.
//
// # Safety
// Pointers must be valid or null.
enum RiaStatus ria_model_info(const struct RiaModel *model,
                              size_t *num_classes,
                              size_t *input_size);

// Grad-CAM heatmap of one image. `class_index < 0` explains the top-1
// prediction. Writes `height * width` values to `heatmap` and the explained
// class to `out_class`.
//
// # Safety
// `image` must hold `3 * height * width` values and `heatmap` room for
// `height * width`; other pointers must be valid or null.
enum RiaStatus ria_gradcam(const struct RiaModel *model,
                           const double *image,
                           size_t height,
                           size_t width,
                           int64_t class_index,
                           double *heatmap,
                           size_t *out_class);

// Box around the highest-mass connected region of `values > threshold`.
// `found` is set to 0 when no pixel exceeds the threshold.
//
// # Safety
// `values` must hold `height * width` values; other pointers must be valid or null.
enum RiaStatus ria_heatmap_box(const double *values,
                               size_t height,
                               size_t width,
                               double threshold,
                               struct RiaBox *out,
                               int32_t *found);

// Creates a detector. `extractor` may be null for the default feature
// extractor; `patch_size` and `k` of 0 select the defaults.
//
// # Safety
// `extractor` must be null or a NUL-terminated string; `out` must be valid or null.
enum RiaStatus ria_detector_new(const char *extractor,
                                size_t patch_size,
                                size_t k,
                                struct RiaDetector **out);

// Releases a detector; null is ignored.
//
// # Safety
// `detector` must come from [`ria_detector_new`] and not be used afterwards.
void ria_detector_free(struct RiaDetector *detector);

// Detects the main object of an image. `fallback` is set to 1 when the
// image was degenerate and the full-image box was returned.
//
// # Safety
// `image` must hold `3 * height * width` values; other pointers must be valid or null.
enum RiaStatus ria_detect_box(const struct RiaDetector *detector,
                              const double *image,
                              size_t height,
                              size_t width,
                              struct RiaBox *out,
                              int32_t *fallback);

// Opens a detection cache written for `detector`'s configuration; a
// different configuration yields [`RiaStatus::StaleCache`].
//
// # Safety
// `path` must be a NUL-terminated string; other pointers must be valid or null.
enum RiaStatus ria_cache_open(const char *path,
                              const struct RiaDetector *detector,
                              struct RiaCache **out);

// Releases a cache; null is ignored.
//
// # Safety
// `cache` must come from [`ria_cache_open`] and not be used afterwards.
void ria_cache_free(struct RiaCache *cache);

// Number of records in a cache.
//
// # Safety
// Pointers must be valid or null.
enum RiaStatus ria_cache_len(const struct RiaCache *cache, size_t *out);

// Looks up the box of `image_id`; [`RiaStatus::NotFound`] when absent.
//
// # Safety
// `image_id` must be a NUL-terminated string; other pointers must be valid or null.
enum RiaStatus ria_cache_get(const struct RiaCache *cache,
                             const char *image_id,
                             struct RiaBox *out,
                             int32_t *fallback);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RIA_H */

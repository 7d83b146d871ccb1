#ifndef TUMORSEG_H
#define TUMORSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_ARGUMENT = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_NOT_FOUND = 3,
  TS_STATUS_INCOMPATIBLE = 4,
  TS_STATUS_INVALID_IMAGE = 5,
  TS_STATUS_IO = 6,
  TS_STATUS_OUT_OF_RANGE = 7,
  TS_STATUS_INTERNAL = 8,
} TsStatus;

typedef enum TsLabel {
  TS_LABEL_NO_TUMOR = 0,
  TS_LABEL_TUMOR = 1,
} TsLabel;

// The detections for one image, best first.
typedef struct TsDetections TsDetections;

// A trained model loaded in inference mode.
typedef struct TsModel TsModel;

// One detection. The box is half-open, in pixels: rows `r0..r1`, columns
// `c0..c1`.
typedef struct TsDetection {
  double r0;
  double c0;
  double r1;
  double c1;
  double score;
  size_t mask_area;
} TsDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or NULL. Valid until the
// next call into this library from the same thread.
const char *ts_last_error(void);

// Library version as a static NUL-terminated string.
const char *ts_version(void);

// Loads the latest checkpoint of the run at `run_dir` (UTF-8 path).
//
// # Safety
// `run_dir` must be a valid NUL-terminated string and `out` a valid pointer.
enum TsStatus ts_model_load(const char *run_dir, struct TsModel **out);

// # Safety
// `model` must come from [`ts_model_load`] or be NULL.
void ts_model_free(struct TsModel *model);

// Runs inference on a row-major, channel-interleaved 8-bit image with 1 or
// 3 channels.
//
// # Safety
// `pixels` must point to `height * width * channels` readable bytes; `model`
// and `out` must be valid.
enum TsStatus ts_model_predict(const struct TsModel *model,
                               const uint8_t *pixels,
                               size_t height,
                               size_t width,
                               size_t channels,
                               struct TsDetections **out);

// # Safety
// `dets` must come from [`ts_model_predict`] or be NULL.
void ts_detections_free(struct TsDetections *dets);

// Number of detections; 0 for NULL.
//
// # Safety
// `dets` must be valid or NULL.
size_t ts_detections_count(const struct TsDetections *dets);

// # Safety
// `dets` and `out` must be valid.
enum TsStatus ts_detections_get(const struct TsDetections *dets,
                                size_t index,
                                struct TsDetection *out);

// Copies detection `index`'s mask as `height * width` bytes of 0 or 1.
//
// # Safety
// `buf` must have room for `buf_len` bytes.
enum TsStatus ts_detections_mask(const struct TsDetections *dets,
                                 size_t index,
                                 uint8_t *buf,
                                 size_t buf_len);

// Applies the diagnosis rule: tumor when any detection scores at least
// `threshold`.
//
// # Safety
// `dets`, `label` and `confidence` must be valid.
enum TsStatus ts_diagnose(const struct TsDetections *dets,
                          double threshold,
                          enum TsLabel *label,
                          double *confidence);

// IoU of two `height * width` masks given as bytes (non-zero = foreground).
//
// # Safety
// `a` and `b` must each point to `height * width` readable bytes.
enum TsStatus ts_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

// IoU of two boxes given as `[r0, c0, r1, c1]`.
//
// # Safety
// `a` and `b` must each point to 4 readable doubles.
enum TsStatus ts_box_iou(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TUMORSEG_H */

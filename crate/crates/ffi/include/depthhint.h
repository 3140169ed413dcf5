#ifndef DEPTHHINT_H
#define DEPTHHINT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DhStatus {
  DH_STATUS_OK = 0,
  // A required pointer argument was null.
  DH_STATUS_NULL_ARGUMENT = 1,
  // Bad argument value, including non-UTF-8 strings.
  DH_STATUS_INVALID_ARGUMENT = 2,
  DH_STATUS_IO = 3,
  // File exists but could not be parsed.
  DH_STATUS_FORMAT = 4,
  DH_STATUS_DIM_MISMATCH = 5,
  // Label missing and no `background` entry.
  DH_STATUS_UNKNOWN_LABEL = 6,
  // Non-finite loss, gradient or prediction.
  DH_STATUS_NUMERICAL = 7,
  // Output buffer shorter than required; the message gives the needed length.
  DH_STATUS_BUFFER_TOO_SMALL = 8,
  // Wrong handle kind for the call, e.g. features from a log-mean model.
  DH_STATUS_WRONG_MODE = 9,
  // Internal panic caught at the boundary.
  DH_STATUS_PANIC = 10,
} DhStatus;

// Model output type, matching the checkpoint mode byte.
typedef enum DhMode {
  DH_MODE_LOG_MEAN = 0,
  DH_MODE_CLASSIFICATION = 1,
} DhMode;

typedef struct DhFrame DhFrame;

typedef struct DhLookupTable DhLookupTable;

typedef struct DhModel DhModel;

typedef struct DhPlane DhPlane;

typedef struct DhStore DhStore;

// The seven standard depth metrics.
typedef struct DhEigenMetrics {
  double abs_rel;
  double sq_rel;
  double rms;
  double rmsl;
  double delta1;
  double delta2;
  double delta3;
} DhEigenMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none.
//
// The string is owned by the library and stays valid until the next
// failing call on the same thread.
const char *dh_last_error(void);

// Loads a DHEMB embedding file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DhStatus dh_store_load(const char *path, struct DhStore **out);

// # Safety
// `store` must be null or a handle from `dh_store_load` not yet freed.
void dh_store_free(struct DhStore *store);

// Embedding dimension, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t dh_store_dim(const struct DhStore *store);

// Number of labels, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t dh_store_len(const struct DhStore *store);

// Copies the vector for `label` (or `background`) into `out`, which must
// hold `dh_store_dim` floats. `fallback` may be null.
//
// # Safety
// Pointers must be valid; `out` must point to `out_len` writable floats.
enum DhStatus dh_store_lookup(const struct DhStore *store,
                              const char *label,
                              float *out,
                              size_t out_len,
                              bool *fallback);

// Loads a DHL2 checkpoint.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DhStatus dh_model_load(const char *path, struct DhModel **out);

// # Safety
// `model` must be null or a handle from `dh_model_load` not yet freed.
void dh_model_free(struct DhModel *model);

// # Safety
// `model` and `out` must be valid pointers.
enum DhStatus dh_model_mode(const struct DhModel *model, enum DhMode *out);

// Input dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dh_model_input_dim(const struct DhModel *model);

// Predicted mean depth in metres for one embedding. Classification models
// report the expected bin centre over 0 to 10 m.
//
// # Safety
// `input` must point to `len` floats; `model` and `out_depth` must be valid.
enum DhStatus dh_model_predict_depth(const struct DhModel *model,
                                     const float *input,
                                     size_t len,
                                     double *out_depth);

// Loads a JSON-lines lookup table.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DhStatus dh_lookup_load(const char *path, struct DhLookupTable **out);

// # Safety
// `table` must be null or a handle from `dh_lookup_load` not yet freed.
void dh_lookup_free(struct DhLookupTable *table);

// Mean depth stored for `label` (or `background`). `fallback` may be null.
//
// # Safety
// Pointers must be valid; `label` nul-terminated.
enum DhStatus dh_lookup_depth(const struct DhLookupTable *table,
                              const char *label,
                              double *out_depth,
                              bool *fallback);

// Loads a DHF1 frame.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DhStatus dh_frame_load(const char *path, struct DhFrame **out);

// # Safety
// `frame` must be null or a handle from `dh_frame_load` not yet freed.
void dh_frame_free(struct DhFrame *frame);

// One-channel depth plane from a lookup table.
//
// # Safety
// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
enum DhStatus dh_render_scalar_lookup(const struct DhFrame *frame,
                                      const struct DhLookupTable *table,
                                      struct DhPlane **out);

// One-channel depth plane from a model and its embeddings.
//
// # Safety
// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
enum DhStatus dh_render_scalar_model(const struct DhFrame *frame,
                                     const struct DhModel *model,
                                     const struct DhStore *store,
                                     struct DhPlane **out);

// 50-channel feature plane from a classification model.
//
// # Safety
// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
enum DhStatus dh_render_features_model(const struct DhFrame *frame,
                                       const struct DhModel *model,
                                       const struct DhStore *store,
                                       struct DhPlane **out);

// 50-channel feature plane from a lookup table exported from a
// classification model.
//
// # Safety
// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
enum DhStatus dh_render_features_lookup(const struct DhFrame *frame,
                                        const struct DhLookupTable *table,
                                        struct DhPlane **out);

// Loads a DHP1 plane.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DhStatus dh_plane_load(const char *path, struct DhPlane **out);

// # Safety
// `plane` must be null or a plane handle not yet freed.
void dh_plane_free(struct DhPlane *plane);

// Writes height, width and channel count. Any out-pointer may be null.
//
// # Safety
// `plane` must be a live handle.
enum DhStatus dh_plane_shape(const struct DhPlane *plane,
                             size_t *height,
                             size_t *width,
                             size_t *channels);

// Borrowed pointer to the row-major, channel-last values and their count.
// Valid until the plane is freed.
//
// # Safety
// `plane` must be a live handle; `data` and `len` valid pointers.
enum DhStatus dh_plane_data(const struct DhPlane *plane, const float **data, size_t *len);

// # Safety
// `plane` must be a live handle and `path` nul-terminated.
enum DhStatus dh_plane_save(const struct DhPlane *plane, const char *path);

// Scale-invariant log loss between positive depths, default form.
//
// # Safety
// `pred` and `gt` must each point to `len` doubles.
enum DhStatus dh_silog(const double *pred, const double *gt, size_t len, double *out_loss);

// # Safety
// `pred` and `gt` must each point to `len` doubles; `out` must be valid.
enum DhStatus dh_eigen_metrics(const double *pred,
                               const double *gt,
                               size_t len,
                               struct DhEigenMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHHINT_H */

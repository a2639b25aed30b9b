#ifndef MULTIBAND_H
#define MULTIBAND_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_POINTER = 1,
  MB_STATUS_INVALID_ARGUMENT = 2,
  MB_STATUS_CONFIG = 3,
  MB_STATUS_LOAD = 4,
  MB_STATUS_NUMERICAL = 5,
  MB_STATUS_CONTRACT = 6,
  MB_STATUS_CHECKPOINT = 7,
  MB_STATUS_IO = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  MB_STATUS_PANIC = 9,
} MbStatus;

/**
 * A generative model restored from a task checkpoint.
 */
typedef struct MbModel MbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, so a
 * caller can size the buffer with a first call passing `len = 0`.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t mb_last_error(char *buf, size_t len);

/**
 * Run the experiment described by a TOML config file, every seed.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string.
 */
enum MbStatus mb_run(const char *config_path, bool resume);

/**
 * Load a task checkpoint. On success `*out` owns a new handle that must be
 * released with [`mb_model_free`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MbStatus mb_model_load(const char *path, struct MbModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`mb_model_load`] not yet freed.
 */
void mb_model_free(struct MbModel *model);

/**
 * Number of tasks the model has been trained on.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MbStatus mb_model_tasks_seen(const struct MbModel *model, size_t *out);

/**
 * Channels, height and width of generated images.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for 3 writes.
 */
enum MbStatus mb_model_image_shape(const struct MbModel *model, size_t *out);

/**
 * Generate `n` images of task `task` with pixel values in `[0, 1]`,
 * row-major `[n, c, h, w]`. `out_len` must be at least `n * c * h * w`.
 * The same `seed` reproduces the same images.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for `out_len` writes.
 */
enum MbStatus mb_model_sample(const struct MbModel *model,
                              size_t task,
                              size_t n,
                              uint64_t seed,
                              float *out,
                              size_t out_len);

/**
 * Frechet distance between Gaussian fits of two row-major `[n, dim]`
 * feature sets.
 *
 * # Safety
 * `real` and `gen` must be valid for `n_real * dim` and `n_gen * dim`
 * reads; `out` must be a valid pointer.
 */
enum MbStatus mb_fid(const double *real,
                     size_t n_real,
                     const double *gen,
                     size_t n_gen,
                     size_t dim,
                     double *out);

/**
 * Wasserstein-1 distance between two 1-D empirical distributions.
 *
 * # Safety
 * `a` and `b` must be valid for `na` and `nb` reads; `out` a valid pointer.
 */
enum MbStatus mb_wasserstein_1d(const double *a,
                                size_t na,
                                const double *b,
                                size_t nb,
                                double *out);

/**
 * Precision and recall (F-beta summaries of the PRD curve) of `gen`
 * against `real`, both row-major `[n, dim]` feature sets.
 *
 * # Safety
 * `real` and `gen` must be valid for `n_real * dim` and `n_gen * dim`
 * reads; `precision` and `recall` must be valid pointers.
 */
enum MbStatus mb_precision_recall(const double *real,
                                  size_t n_real,
                                  const double *gen,
                                  size_t n_gen,
                                  size_t dim,
                                  size_t num_clusters,
                                  size_t num_angles,
                                  size_t num_runs,
                                  uint64_t seed,
                                  double *precision,
                                  double *recall);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIBAND_H */

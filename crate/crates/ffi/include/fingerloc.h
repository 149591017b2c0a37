#ifndef FINGERLOC_H
#define FINGERLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_DATA_ERROR = 3,
  FL_STATUS_IO_ERROR = 4,
  FL_STATUS_INTERNAL = 5,
  FL_STATUS_PANIC = 6,
} FlStatus;

/**
 * A loaded cascade model.
 */
typedef struct FlCascade FlCascade;

/**
 * Output of [`fl_cascade_localize`]. `env` indexes [`fl_environment_name`].
 */
typedef struct FlLocation {
  int32_t env;
  double x_cm;
  double y_cm;
} FlLocation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *fl_last_error_message(void);

/**
 * Static name of environment `index` (0..=3), or NULL.
 */
const char *fl_environment_name(int32_t index);

/**
 * Loads a model directory written by `fingerloc train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FlStatus fl_cascade_load(const char *dir, struct FlCascade **out);

/**
 * Releases a handle from [`fl_cascade_load`]. NULL is ignored.
 *
 * # Safety
 * `handle` must come from [`fl_cascade_load`] and not be used afterwards.
 */
void fl_cascade_free(struct FlCascade *handle);

/**
 * Number of CTF points the model expects.
 *
 * # Safety
 * `handle` must be a live handle or NULL.
 */
size_t fl_cascade_points(const struct FlCascade *handle);

/**
 * Localizes one CTF sweep of `n_points` bins. Pass NaN for `rss_db` to
 * derive it from the sweep. FCF is always derived.
 *
 * # Safety
 * `ctf_re` and `ctf_im` must point to `n_points` doubles; `out` must be valid.
 */
enum FlStatus fl_cascade_localize(const struct FlCascade *handle,
                                  const double *ctf_re,
                                  const double *ctf_im,
                                  size_t n_points,
                                  double rss_db,
                                  struct FlLocation *out);

/**
 * Percentage RMSE reduction relative to the RSS baseline.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FlStatus fl_alpha(double rmse_rss, double rmse_beta, double *out);

/**
 * RMSE between `n` estimated and true points, both stored as interleaved
 * `x0, y0, x1, y1, ...`.
 *
 * # Safety
 * `estimates` and `truths` must point to `2 * n` doubles; `out` must be valid.
 */
enum FlStatus fl_rmse(const double *estimates, const double *truths, size_t n, double *out);

/**
 * Channel transfer function of `n_paths` components over `n_points`
 * frequencies spanning `span_hz` around `center_hz`.
 *
 * # Safety
 * Path arrays must hold `n_paths` doubles, output arrays `n_points`.
 */
enum FlStatus fl_synth_ctf(const double *amplitudes,
                           const double *delays_s,
                           const double *phases_rad,
                           size_t n_paths,
                           double center_hz,
                           double span_hz,
                           size_t n_points,
                           double *out_re,
                           double *out_im);

/**
 * Frequency coherence of a CTF sweep for lags `0..=max_lag`.
 *
 * # Safety
 * Inputs must hold `n_points` doubles, outputs `max_lag + 1`.
 */
enum FlStatus fl_compute_fcf(const double *ctf_re,
                             const double *ctf_im,
                             size_t n_points,
                             size_t max_lag,
                             double *out_re,
                             double *out_im);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FINGERLOC_H */

#ifndef TMRD_H
#define TMRD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum TmrdStatus {
  TMRD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TMRD_STATUS_NULL_POINTER = 1,
  TMRD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unknown key, bad value or failed validation.
   */
  TMRD_STATUS_CONFIG = 3,
  TMRD_STATUS_IO = 4,
  /**
   * Malformed dataset or checkpoint file.
   */
  TMRD_STATUS_FORMAT = 5,
  /**
   * Training produced non-finite values.
   */
  TMRD_STATUS_DIVERGED = 6,
  /**
   * Internal error; the library caught a panic.
   */
  TMRD_STATUS_INTERNAL = 7,
} TmrdStatus;

/**
 * Training configuration.
 */
typedef struct TmrdConfig TmrdConfig;

/**
 * Generated scenes with their splits.
 */
typedef struct TmrdDataset TmrdDataset;

/**
 * A training run: its config, its own copy of the data and the current state.
 */
typedef struct TmrdRun TmrdRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *tmrd_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void tmrd_string_free(char *s);

/**
 * `count` scenes, `round(count * ratio)` of them labeled, plus the default
 * test split.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum TmrdStatus tmrd_dataset_generate(uint64_t seed,
                                      size_t count,
                                      double ratio,
                                      struct TmrdDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TmrdStatus tmrd_dataset_load(const char *path, struct TmrdDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle and `path` a NUL-terminated string.
 */
enum TmrdStatus tmrd_dataset_save(const struct TmrdDataset *ds, const char *path);

/**
 * Split sizes. Any output pointer may be null.
 *
 * # Safety
 * `ds` must be a live dataset handle; non-null outputs must be writable.
 */
enum TmrdStatus tmrd_dataset_counts(const struct TmrdDataset *ds,
                                    size_t *labeled,
                                    size_t *unlabeled,
                                    size_t *test);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void tmrd_dataset_free(struct TmrdDataset *ds);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum TmrdStatus tmrd_config_default(struct TmrdConfig **out);

/**
 * Parses `key = value` lines over the defaults; every bad line is listed
 * in the error message.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TmrdStatus tmrd_config_parse(const char *text, struct TmrdConfig **out);

/**
 * Sets one key such as `train.seed`. Cross-field checks run when a run is
 * created.
 *
 * # Safety
 * `cfg` must be a live config handle; `key` and `value` NUL-terminated strings.
 */
enum TmrdStatus tmrd_config_set(struct TmrdConfig *cfg, const char *key, const char *value);

/**
 * The config as `key = value` text; release with [`tmrd_string_free`].
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum TmrdStatus tmrd_config_to_text(const struct TmrdConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void tmrd_config_free(struct TmrdConfig *cfg);

/**
 * A fresh run at iteration 0. The run copies both the config and the data.
 *
 * # Safety
 * `cfg` and `ds` must be live handles and `out` a valid pointer.
 */
enum TmrdStatus tmrd_run_new(const struct TmrdConfig *cfg,
                             const struct TmrdDataset *ds,
                             struct TmrdRun **out);

/**
 * Trains until iteration `stop` (capped at the configured total).
 *
 * # Safety
 * `run` must be a live run handle.
 */
enum TmrdStatus tmrd_run_until(struct TmrdRun *run, size_t stop);

/**
 * Next iteration to run.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum TmrdStatus tmrd_run_iteration(const struct TmrdRun *run, size_t *out);

/**
 * Teacher AP50 and mAP on the test split and the mean teacher-student
 * representation KL. Any output pointer may be null.
 *
 * # Safety
 * `run` must be a live run handle; non-null outputs must be writable.
 */
enum TmrdStatus tmrd_run_evaluate(const struct TmrdRun *run,
                                  double *ap50,
                                  double *map,
                                  double *repr_kl);

/**
 * The metrics log so far as CSV; release with [`tmrd_string_free`].
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum TmrdStatus tmrd_run_metrics_csv(const struct TmrdRun *run, char **out);

/**
 * # Safety
 * `run` must be a live run handle and `path` a NUL-terminated string.
 */
enum TmrdStatus tmrd_run_save(const struct TmrdRun *run, const char *path);

/**
 * Resumes a checkpoint against `ds`, which must be the dataset it was
 * trained on.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `ds` a live handle and `out` a valid pointer.
 */
enum TmrdStatus tmrd_run_load(const char *path, const struct TmrdDataset *ds, struct TmrdRun **out);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void tmrd_run_free(struct TmrdRun *run);

/**
 * Finite-difference check of one objective: 0 supervised loss, 1 refinement
 * loss in the scaling coefficients, 2 student objective. Writes the largest
 * relative error and whether it is within tolerance.
 *
 * # Safety
 * Non-null outputs must be writable.
 */
enum TmrdStatus tmrd_gradcheck(uint32_t target,
                               double h,
                               uint64_t seed,
                               double *max_rel_error,
                               bool *passed);

/**
 * Static version string of the library; never freed.
 */
const char *tmrd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMRD_H */

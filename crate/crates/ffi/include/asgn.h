/* Generated by cbindgen from asgn-ffi; do not edit. */

#ifndef ASGN_H
#define ASGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible entry point.
 */
typedef enum AsgnStatus {
  /**
   * The call succeeded.
   */
  AsgnStatus_Ok = 0,
  /**
   * A required pointer argument was NULL.
   */
  AsgnStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  AsgnStatus_InvalidString = 2,
  /**
   * The file or directory could not be read.
   */
  AsgnStatus_Io = 3,
  /**
   * The input was understood but rejected (bad format, bad index,
   * wrong buffer length).
   */
  AsgnStatus_InvalidInput = 4,
  /**
   * The checkpoint's dimensions do not fit the dataset.
   */
  AsgnStatus_ShapeMismatch = 5,
  /**
   * An internal invariant failed; the message carries the panic text.
   */
  AsgnStatus_Panic = 6,
} AsgnStatus;

/**
 * An opened dataset directory.
 */
typedef struct AsgnDataset AsgnDataset;

/**
 * A loaded training checkpoint.
 */
typedef struct AsgnModel AsgnModel;

/**
 * A model bound to a dataset, with the snapshot graphs precomputed.
 */
typedef struct AsgnSession AsgnSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The library version as a static NUL-terminated string.
 */
const char *asgn_version(void);

/**
 * Description of the calling thread's most recent failure. Empty until a
 * call fails; valid until the thread's next failing call.
 */
const char *asgn_last_error_message(void);

/**
 * Opens a dataset directory written by `asgn simulate`.
 *
 * # Safety
 * `dir` must be NULL or NUL-terminated; `out` must be NULL or writable.
 */
enum AsgnStatus asgn_dataset_open(const char *dir, struct AsgnDataset **out);

/**
 * Frees a dataset handle. NULL is a no-op.
 *
 * # Safety
 * `ds` must be NULL or a pointer returned by [`asgn_dataset_open`] that
 * has not been closed yet.
 */
void asgn_dataset_close(struct AsgnDataset *ds);

/**
 * Number of grid nodes; 0 if `ds` is NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
uint64_t asgn_dataset_grid_count(const struct AsgnDataset *ds);

/**
 * Number of time steps; 0 if `ds` is NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
uint64_t asgn_dataset_steps(const struct AsgnDataset *ds);

/**
 * Number of physical variables per node; 0 if `ds` is NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
uint64_t asgn_dataset_var_count(const struct AsgnDataset *ds);

/**
 * Loads a checkpoint written by `asgn train`.
 *
 * # Safety
 * `path` must be NULL or NUL-terminated; `out` must be NULL or writable.
 */
enum AsgnStatus asgn_model_load(const char *path, struct AsgnModel **out);

/**
 * Frees a model handle. NULL is a no-op.
 *
 * # Safety
 * `model` must be NULL or a pointer returned by [`asgn_model_load`] that
 * has not been freed yet.
 */
void asgn_model_free(struct AsgnModel *model);

/**
 * Input window length the model was trained with; 0 if `model` is NULL.
 *
 * # Safety
 * `model` must be NULL or a live model handle.
 */
uint64_t asgn_model_window(const struct AsgnModel *model);

/**
 * Binds a model to a dataset and precomputes the per-step graphs. The
 * session owns copies, so both handles may be freed afterwards.
 *
 * # Safety
 * `model` and `ds` must be live handles (or NULL); `out` must be NULL or
 * writable.
 */
enum AsgnStatus asgn_session_new(const struct AsgnModel *model,
                                 const struct AsgnDataset *ds,
                                 struct AsgnSession **out);

/**
 * Frees a session. NULL is a no-op.
 *
 * # Safety
 * `sess` must be NULL or a pointer returned by [`asgn_session_new`] that
 * has not been freed yet.
 */
void asgn_session_free(struct AsgnSession *sess);

/**
 * Variables each forecast produces (the required `out` length); 0 if
 * `sess` is NULL.
 *
 * # Safety
 * `sess` must be NULL or a live session handle.
 */
uint64_t asgn_session_var_count(const struct AsgnSession *sess);

/**
 * Earliest valid `t_end` for [`asgn_session_forecast`]; 0 if `sess` is
 * NULL.
 *
 * # Safety
 * `sess` must be NULL or a live session handle.
 */
uint64_t asgn_session_min_t_end(const struct AsgnSession *sess);

/**
 * Forecasts the state of grid node `target` at step `t_end + 1` from the
 * window ending at `t_end`, writing one de-normalized value per variable
 * into `out` (length `out_len`, which must equal the session's variable
 * count). Deterministic: repeated calls return identical values.
 *
 * # Safety
 * `sess` must be NULL or a live session handle; `out` must be NULL or
 * point to `out_len` writable doubles.
 */
enum AsgnStatus asgn_session_forecast(const struct AsgnSession *sess,
                                      uint64_t target,
                                      uint64_t t_end,
                                      double *out,
                                      size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASGN_H */

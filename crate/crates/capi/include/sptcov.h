#ifndef SPTCOV_H
#define SPTCOV_H

/* Generated by cbindgen from the sptcov-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Banded component fitted alongside the separable part.
 */
typedef enum SptBandedKind {
  SPT_BANDED_KIND_NONE = 0,
  SPT_BANDED_KIND_STATIONARY = 1,
  SPT_BANDED_KIND_BANDED = 2,
} SptBandedKind;

/**
 * Result status of every C API call.
 */
typedef enum SptStatus {
  SPT_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or an argument violating documented bounds.
   */
  SPT_STATUS_INVALID_ARGUMENT = 1,
  SPT_STATUS_BANDWIDTH_OUT_OF_RANGE = 2,
  SPT_STATUS_SHAPE_MISMATCH = 3,
  SPT_STATUS_DEGENERATE_TRACE = 4,
  SPT_STATUS_ORACLE_CAP_EXCEEDED = 5,
  SPT_STATUS_SINGULAR_SYSTEM = 6,
  SPT_STATUS_NON_CONVERGENCE = 7,
  SPT_STATUS_RANK_EXCEEDED = 8,
  SPT_STATUS_NON_FINITE = 9,
  SPT_STATUS_INVALID_CONFIG = 10,
  SPT_STATUS_IO = 11,
  SPT_STATUS_FORMAT = 12,
  SPT_STATUS_PARSE = 13,
  /**
   * A panic was caught at the boundary; see the last error message.
   */
  SPT_STATUS_PANIC = 14,
} SptStatus;

/**
 * Opaque fitted-model handle.
 */
typedef struct SptModel SptModel;

/**
 * Opaque sample stack handle.
 */
typedef struct SptStack SptStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message of the current thread ("" when no call failed yet).
 * The pointer stays valid until the next failing call on this thread.
 */
const char *spt_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *spt_version(void);

/**
 * Copies `n` samples of `k1 x k2` values (sample-major, row-major) into a
 * new stack handle. `centered` asserts the per-cell means are already
 * zero; passing `true` for uncentered data is rejected.
 *
 * # Safety
 * `data` must point to `n * k1 * k2` readable doubles; `out` must be a
 * valid destination for one pointer.
 */
enum SptStatus spt_stack_new(const double *data,
                             size_t n,
                             size_t k1,
                             size_t k2,
                             bool centered,
                             struct SptStack **out);

/**
 * Releases a stack handle. Null is ignored.
 *
 * # Safety
 * `stack` must come from this library and not have been freed before.
 */
void spt_stack_free(struct SptStack *stack);

/**
 * Writes the stack dimensions to any non-null output pointers.
 *
 * # Safety
 * `stack` must be a live handle; output pointers may be null.
 */
enum SptStatus spt_stack_dims(const struct SptStack *stack, size_t *n, size_t *k1, size_t *k2);

/**
 * Copies the stack payload (sample-major, row-major) into `data`.
 *
 * # Safety
 * `data` must hold `n * k1 * k2` doubles.
 */
enum SptStatus spt_stack_data(const struct SptStack *stack, double *data);

/**
 * Reads a binary stack file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid destination.
 */
enum SptStatus spt_stack_read(const char *path, struct SptStack **out);

/**
 * Writes a stack handle to a binary stack file.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `stack` a live handle.
 */
enum SptStatus spt_stack_write(const char *path, const struct SptStack *stack);

/**
 * Fits a separable-plus-banded model with bandwidth `d` to the stack.
 *
 * # Safety
 * `stack` must be a live handle, `out` a valid destination.
 */
enum SptStatus spt_estimate(const struct SptStack *stack,
                            size_t d,
                            enum SptBandedKind kind,
                            bool center,
                            bool psd,
                            struct SptModel **out);

/**
 * Cross-validates the bandwidth over `candidates` and writes the winner.
 * Stationary banded parts, global centering, seeded fold shuffle.
 *
 * # Safety
 * `candidates` must hold `n_candidates` values; `out` must be valid.
 */
enum SptStatus spt_select_bandwidth(const struct SptStack *stack,
                                    const size_t *candidates,
                                    size_t n_candidates,
                                    size_t folds,
                                    uint64_t seed,
                                    size_t *out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not have been freed before.
 */
void spt_model_free(struct SptModel *model);

/**
 * Writes the model dimensions and bandwidth to non-null output pointers.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum SptStatus spt_model_dims(const struct SptModel *model, size_t *k1, size_t *k2, size_t *d);

/**
 * Loads a JSON model file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid destination.
 */
enum SptStatus spt_model_read(const char *path, struct SptModel **out);

/**
 * Saves a model handle as a JSON model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `model` a live handle.
 */
enum SptStatus spt_model_write(const char *path, const struct SptModel *model);

/**
 * Applies the model as an operator: `y = (A1 (x) A2 + B) x`.
 *
 * # Safety
 * `x` and `y` must each hold `k1 * k2` doubles (row-major).
 */
enum SptStatus spt_model_apply(const struct SptModel *model, const double *x, double *y);

/**
 * Solves `(A1 (x) A2 + B + ridge I) x = y` to relative tolerance `tol`.
 * The final iterate is written to `x` even when the outer budget runs out
 * (status `SPT_STATUS_NON_CONVERGENCE`); `out_iters`, when non-null,
 * receives the outer sweep count.
 *
 * # Safety
 * `y` and `x` must each hold `k1 * k2` doubles (row-major).
 */
enum SptStatus spt_model_solve(const struct SptModel *model,
                               const double *y,
                               double *x,
                               double tol,
                               double ridge,
                               size_t max_outer,
                               size_t *out_iters);

/**
 * Relative error of `estimate` against `truth` in Frobenius norm,
 * computed without materializing dense tensors.
 *
 * # Safety
 * Both handles must be live; `out` must be a valid destination.
 */
enum SptStatus spt_rel_error(const struct SptModel *estimate,
                             const struct SptModel *truth,
                             double *out);

/**
 * Bootstrap goodness-of-fit test of the separable-plus-banded class with
 * bandwidth `d` (`0` tests plain separability). Writes the test statistic
 * and the bootstrap p-value.
 *
 * # Safety
 * `stack` must be a live handle; output pointers may be null.
 */
enum SptStatus spt_gof(const struct SptStack *stack,
                       size_t d,
                       size_t i_dims,
                       size_t j_dims,
                       size_t n_boot,
                       uint64_t seed,
                       double *out_statistic,
                       double *out_p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPTCOV_H */

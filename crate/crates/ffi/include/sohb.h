#ifndef SOHB_H
#define SOHB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SohbStatus {
  SOHB_STATUS_OK = 0,
  /**
   * Null pointer or buffer of the wrong length.
   */
  SOHB_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Invalid κ or other configuration value.
   */
  SOHB_STATUS_INVALID_CONFIG = 2,
  /**
   * `n` outside `[3, 11]`.
   */
  SOHB_STATUS_UNSUPPORTED_DIMENSION = 3,
  /**
   * Solver or integration failure.
   */
  SOHB_STATUS_NUMERICAL_FAILURE = 4,
  /**
   * Internal panic caught at the boundary.
   */
  SOHB_STATUS_PANIC = 5,
} SohbStatus;

/**
 * Opaque handle to a solved profile α.
 */
typedef struct SohbSolution SohbSolution;

/**
 * Coefficient set with intermediates. `err_est` is NaN when not computed.
 */
typedef struct SohbCoefficients {
  uint32_t n;
  double kappa;
  double c1;
  double c2;
  double c3;
  double c4;
  double big_c2;
  double big_c3;
  double big_c4;
  double big_c4_prime;
  double err_est;
  uint32_t nq;
  uint32_t degree;
} SohbCoefficients;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread (empty if none). The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sohb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sohb_version(void);

/**
 * Largest supported dimension.
 */
size_t sohb_max_dimension(void);

/**
 * Solves for α. `degree` or `nq` equal to 0 selects the default.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SohbStatus sohb_solution_new(size_t n,
                                  double kappa,
                                  size_t degree,
                                  size_t nq,
                                  struct SohbSolution **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sol` must come from [`sohb_solution_new`] and not have been freed.
 */
void sohb_solution_free(struct SohbSolution *sol);

/**
 * Rank `p = ⌊n/2⌋` of the solution's torus, i.e. the length of angle and
 * α vectors.
 *
 * # Safety
 * `sol` must be a live handle or null (returns 0).
 */
size_t sohb_solution_rank(const struct SohbSolution *sol);

/**
 * Evaluates α at `angles` (length `p`) into `alpha` (length `p`).
 *
 * # Safety
 * `angles` and `alpha` must point to `len` valid doubles.
 */
enum SohbStatus sohb_solution_alpha(const struct SohbSolution *sol,
                                    const double *angles,
                                    double *alpha,
                                    size_t len);

/**
 * Coefficients of a solved profile (no error estimate).
 *
 * # Safety
 * `sol` must be a live handle and `out` writable.
 */
enum SohbStatus sohb_solution_coefficients(const struct SohbSolution *sol,
                                           struct SohbCoefficients *out);

/**
 * Full coefficient set with default discretization and error estimate.
 *
 * # Safety
 * `out` must be writable.
 */
enum SohbStatus sohb_coefficients(size_t n, double kappa, struct SohbCoefficients *out);

/**
 * Order parameter `c1(κ)` for `κ ≥ 0`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SohbStatus sohb_order_parameter(size_t n, double kappa, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOHB_H */

#ifndef PNEC_H
#define PNEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum PnecStatus {
  PNEC_STATUS_OK = 0,
  PNEC_STATUS_NULL_POINTER = 1,
  PNEC_STATUS_INVALID_INPUT = 2,
  PNEC_STATUS_INSUFFICIENT_DATA = 3,
  PNEC_STATUS_DEGENERATE = 4,
  PNEC_STATUS_NUMERICAL_FAILURE = 5,
  PNEC_STATUS_PANIC = 6,
} PnecStatus;

/**
 * Result of a multi-stage estimate.
 */
typedef struct PnecEstimate PnecEstimate;

/**
 * Correspondences with their camera.
 */
typedef struct PnecProblem PnecProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *pnec_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *pnec_last_error(void);

/**
 * Creates an empty problem for a pinhole camera.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
enum PnecStatus pnec_problem_new(double fx,
                                 double fy,
                                 double cx,
                                 double cy,
                                 struct PnecProblem **out);

/**
 * Appends a correspondence. `cov` and `cov_prime` may be NULL for the unit
 * covariance.
 *
 * # Safety
 * `problem` must come from [`pnec_problem_new`]; non-NULL covariance
 * pointers must reference three readable doubles.
 */
enum PnecStatus pnec_problem_add(struct PnecProblem *problem,
                                 double x1,
                                 double y1,
                                 double x2,
                                 double y2,
                                 const double *cov,
                                 const double *cov_prime);

/**
 * Number of correspondences, 0 for NULL.
 *
 * # Safety
 * `problem` must be NULL or come from [`pnec_problem_new`].
 */
size_t pnec_problem_len(const struct PnecProblem *problem);

/**
 * Releases a problem. NULL is ignored.
 *
 * # Safety
 * `problem` must be NULL or come from [`pnec_problem_new`] and not be used
 * afterwards.
 */
void pnec_problem_free(struct PnecProblem *problem);

/**
 * Symmetric PNEC energy of a pose.
 *
 * # Safety
 * `problem` must come from [`pnec_problem_new`], `rotation` must reference
 * nine doubles, `translation` three, `energy` one writable double.
 */
enum PnecStatus pnec_energy(const struct PnecProblem *problem,
                            const double *rotation,
                            const double *translation,
                            double *energy);

/**
 * Refines a pose on the symmetric PNEC energy, writing the result in place.
 *
 * # Safety
 * `problem` must come from [`pnec_problem_new`]; `rotation` must reference
 * nine and `translation` three readable and writable doubles.
 */
enum PnecStatus pnec_refine(const struct PnecProblem *problem,
                            double *rotation,
                            double *translation);

/**
 * Runs RANSAC, NEC least squares and PNEC refinement.
 *
 * # Safety
 * `problem` must come from [`pnec_problem_new`]; `out` must be a valid
 * pointer to writable storage for one handle pointer.
 */
enum PnecStatus pnec_estimate(const struct PnecProblem *problem,
                              uint64_t seed,
                              struct PnecEstimate **out);

/**
 * Copies the estimated pose.
 *
 * # Safety
 * `estimate` must come from [`pnec_estimate`]; `rotation` must reference
 * nine writable doubles and `translation` three.
 */
enum PnecStatus pnec_estimate_pose(const struct PnecEstimate *estimate,
                                   double *rotation,
                                   double *translation);

/**
 * Writes the inlier mask (1 inlier, 0 outlier) into `mask`, which holds
 * `len` bytes, and the inlier count into `count` when it is non-NULL.
 *
 * # Safety
 * `estimate` must come from [`pnec_estimate`]; `mask` must reference `len`
 * writable bytes.
 */
enum PnecStatus pnec_estimate_inliers(const struct PnecEstimate *estimate,
                                      uint8_t *mask,
                                      size_t len,
                                      size_t *count);

/**
 * Releases an estimate. NULL is ignored.
 *
 * # Safety
 * `estimate` must be NULL or come from [`pnec_estimate`] and not be used
 * afterwards.
 */
void pnec_estimate_free(struct PnecEstimate *estimate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PNEC_H */

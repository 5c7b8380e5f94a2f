#ifndef HUM_FFI_H
#define HUM_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call.
 */
typedef enum HumStatus {
  HUM_STATUS_OK = 0,
  HUM_STATUS_NULL_POINTER = 1,
  HUM_STATUS_INVALID_UTF8 = 2,
  HUM_STATUS_INVALID_CONFIG = 3,
  HUM_STATUS_INVALID_ARGUMENT = 4,
  /**
   * An iterative method stopped at its budget; outputs are still set.
   */
  HUM_STATUS_NOT_CONVERGED = 5,
  HUM_STATUS_SOLVER_FAILURE = 6,
  HUM_STATUS_PANIC = 7,
} HumStatus;

/**
 * Synthesized control. Opaque to C.
 */
typedef struct HumControlResult HumControlResult;

/**
 * Problem built from a JSON configuration. Opaque to C.
 */
typedef struct HumProblem HumProblem;

/**
 * Scalar summary of a control synthesis.
 */
typedef struct HumControlSummary {
  double epsilon;
  double delta;
  /**
   * 0 for the plain functional, 1 for the weighted one.
   */
  int32_t mode;
  double control_norm_l2;
  double control_norm_lq;
  double q;
  double terminal_v_norm;
  double terminal_ue_norm;
  double bound_ratio;
  size_t iterations;
  bool converged;
} HumControlSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or null. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *hum_last_error(void);

/**
 * Parses and validates a JSON run configuration and builds the problem.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HumStatus hum_problem_from_json(const char *json, struct HumProblem **out);

/**
 * Releases a problem; null is ignored.
 *
 * # Safety
 * `problem` must come from [`hum_problem_from_json`] and not be used again.
 */
void hum_problem_free(struct HumProblem *problem);

/**
 * Interior node count, or 0 for null.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
size_t hum_problem_nodes(const struct HumProblem *problem);

/**
 * Time step count, or 0 for null.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
size_t hum_problem_steps(const struct HumProblem *problem);

/**
 * Replaces the relaxation parameter.
 *
 * # Safety
 * `problem` must be a live handle.
 */
enum HumStatus hum_problem_set_epsilon(struct HumProblem *problem, double epsilon);

/**
 * Synthesizes the control with the configured functional. On
 * [`HumStatus::NotConverged`] the best iterate is still returned in `out`.
 *
 * # Safety
 * `problem` must be a live handle and `out` a valid pointer.
 */
enum HumStatus hum_synthesize_control(const struct HumProblem *problem,
                                      struct HumControlResult **out);

/**
 * Releases a result; null is ignored.
 *
 * # Safety
 * `result` must come from [`hum_synthesize_control`] and not be used again.
 */
void hum_result_free(struct HumControlResult *result);

/**
 * Copies the scalar summary into `out`.
 *
 * # Safety
 * `result` must be a live handle and `out` a valid pointer.
 */
enum HumStatus hum_result_summary(const struct HumControlResult *result,
                                  struct HumControlSummary *out);

/**
 * Copies the control, `steps * nodes` values, into `buf`.
 *
 * # Safety
 * `result` must be a live handle and `buf` must hold `len` doubles.
 */
enum HumStatus hum_result_control(const struct HumControlResult *result, double *buf, size_t len);

/**
 * Relative value of the discrete duality identity for control `f`
 * (`steps * nodes` values, zero outside the control region) and terminal
 * data `(phi_t, phi_et)` (`nodes` values each).
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `out` must be valid.
 */
enum HumStatus hum_duality_gap(const struct HumProblem *problem,
                               const double *f,
                               size_t f_len,
                               const double *phi_t,
                               const double *phi_et,
                               size_t nodes,
                               double *out);

/**
 * Observability constant of the adjoint system.
 *
 * # Safety
 * `problem` must be a live handle and `out` a valid pointer.
 */
enum HumStatus hum_observability_constant(const struct HumProblem *problem, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HUM_FFI_H */

#ifndef WEAKIV_H
#define WEAKIV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success; each error kind has its own negative code.
 */
typedef enum WeakivStatus {
  WEAKIV_STATUS_OK = 0,
  WEAKIV_STATUS_NULL_POINTER = -1,
  WEAKIV_STATUS_DIMENSION = -2,
  WEAKIV_STATUS_RANK = -3,
  WEAKIV_STATUS_NON_FINITE = -4,
  WEAKIV_STATUS_SINGULARITY = -5,
  WEAKIV_STATUS_CONVERGENCE = -6,
  WEAKIV_STATUS_PARTITION = -7,
  WEAKIV_STATUS_UNSUPPORTED = -8,
  WEAKIV_STATUS_DOMAIN = -9,
  WEAKIV_STATUS_CONFIG = -10,
  WEAKIV_STATUS_PARSE = -11,
  WEAKIV_STATUS_GAP = -12,
  WEAKIV_STATUS_SCHEMA = -13,
  WEAKIV_STATUS_IO = -14,
  WEAKIV_STATUS_PANIC = -99,
} WeakivStatus;

typedef enum WeakivMethod {
  WEAKIV_METHOD_TWO_SLS = 0,
  WEAKIV_METHOD_LIML = 1,
  /**
   * Uses the `kclass_alpha` argument.
   */
  WEAKIV_METHOD_K_CLASS = 2,
} WeakivMethod;

typedef enum WeakivTest {
  WEAKIV_TEST_HANSEN_J = 0,
  WEAKIV_TEST_KP = 1,
  WEAKIV_TEST_SCORE2SLS = 2,
  WEAKIV_TEST_SCORE_LIML = 3,
  WEAKIV_TEST_SARGAN = 4,
  WEAKIV_TEST_EFFECTIVE_F = 5,
} WeakivTest;

typedef enum WeakivCovariance {
  WEAKIV_COVARIANCE_HOMOSKEDASTIC = 0,
  WEAKIV_COVARIANCE_HC0 = 1,
  WEAKIV_COVARIANCE_HC1 = 2,
  /**
   * Uses the `lags` argument.
   */
  WEAKIV_COVARIANCE_NEWEY_WEST = 3,
} WeakivCovariance;

typedef enum WeakivDesign {
  WEAKIV_DESIGN_DESIGN1 = 0,
  WEAKIV_DESIGN_DESIGN2 = 1,
  /**
   * Uses the `omega` argument.
   */
  WEAKIV_DESIGN_POWER = 2,
} WeakivDesign;

/**
 * Opaque dataset with exogenous controls already partialled out.
 */
typedef struct WeakivDataset WeakivDataset;

/**
 * Opaque estimation result.
 */
typedef struct WeakivEstimate WeakivEstimate;

typedef struct WeakivTestResult {
  double statistic;
  size_t df;
  /**
   * NaN when the test has no χ² p-value.
   */
  double p_value;
  /**
   * NaN when the test has no companion critical value.
   */
  double critical_value;
} WeakivTestResult;

typedef struct WeakivSimulationSummary {
  double j_rate;
  double kp_rate;
  double median_bias_2sls;
  double median_bias_liml;
  double range_90_10_2sls;
  double range_90_10_liml;
  double pi_used;
  size_t replications_completed;
  size_t degenerate_count;
} WeakivSimulationSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length of the last error message on this thread, excluding the NUL.
 */
size_t weakiv_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the number of bytes written excluding the NUL.
 *
 * # Safety
 *
 * `buf` must be null or valid for `len` bytes.
 */
size_t weakiv_last_error_message(char *buf, size_t len);

/**
 * Static, NUL-terminated library version.
 */
const char *weakiv_version(void);

/**
 * Builds a dataset from column-major arrays: `y` (n), `x` (n × kx),
 * `z` (n × kz) and optional `exog` (n × kw, null when kw = 0). Exogenous
 * columns are partialled out immediately.
 *
 * # Safety
 *
 * Array pointers must be valid for the stated sizes; `out` must be writable.
 */
enum WeakivStatus weakiv_dataset_new(size_t n,
                                     size_t kx,
                                     size_t kz,
                                     size_t kw,
                                     const double *y,
                                     const double *x,
                                     const double *z,
                                     const double *exog,
                                     struct WeakivDataset **out);

/**
 * # Safety
 *
 * `d` must be null or a handle from `weakiv_dataset_new`, freed once.
 */
void weakiv_dataset_free(struct WeakivDataset *d);

/**
 * Point estimate with HC0 sandwich standard errors.
 *
 * # Safety
 *
 * `d` must be a live dataset handle; `out` must be writable.
 */
enum WeakivStatus weakiv_estimate(const struct WeakivDataset *d,
                                  enum WeakivMethod method,
                                  double kclass_alpha,
                                  struct WeakivEstimate **out);

/**
 * # Safety
 *
 * `e` must be null or a handle from `weakiv_estimate`, freed once.
 */
void weakiv_estimate_free(struct WeakivEstimate *e);

/**
 * Number of coefficients in an estimate (0 for a null handle).
 *
 * # Safety
 *
 * `e` must be null or a live estimate handle.
 */
size_t weakiv_estimate_len(const struct WeakivEstimate *e);

/**
 * Copies β̂, standard errors and the k-class α into caller buffers of length
 * `len` (must equal `weakiv_estimate_len`). Any output pointer may be null.
 *
 * # Safety
 *
 * `e` must be a live estimate handle; non-null outputs must be writable.
 */
enum WeakivStatus weakiv_estimate_values(const struct WeakivEstimate *e,
                                         size_t len,
                                         double *beta,
                                         double *std_errors,
                                         double *alpha);

/**
 * Runs one overidentification or strength test with the default partition.
 *
 * # Safety
 *
 * `d` must be a live dataset handle; `out` must be writable.
 */
enum WeakivStatus weakiv_test(const struct WeakivDataset *d,
                              enum WeakivTest test,
                              enum WeakivCovariance cov,
                              size_t lags,
                              struct WeakivTestResult *out);

/**
 * Upper-tail χ²(df) probability.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum WeakivStatus weakiv_chi2_sf(double x, size_t df, double *out);

/**
 * Monte Carlo size study for one design cell at a single nominal `level`,
 * with an intercept and variance calibration of π.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum WeakivStatus weakiv_simulate(enum WeakivDesign design,
                                  double alpha,
                                  double omega,
                                  size_t kz,
                                  double rho,
                                  double mu2,
                                  size_t n,
                                  size_t replications,
                                  uint64_t seed,
                                  double level,
                                  struct WeakivSimulationSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WEAKIV_H */

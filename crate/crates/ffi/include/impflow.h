#ifndef IMPFLOW_H
#define IMPFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ImpflowRelevance {
  IMPFLOW_RELEVANCE_RELEVANT = 0,
  IMPFLOW_RELEVANCE_MARGINAL = 1,
  IMPFLOW_RELEVANCE_IRRELEVANT = 2,
  IMPFLOW_RELEVANCE_UNDEFINED = 3,
} ImpflowRelevance;

typedef enum ImpflowStatus {
  IMPFLOW_STATUS_OK = 0,
  IMPFLOW_STATUS_NULL_POINTER = 1,
  IMPFLOW_STATUS_INVALID_ARGUMENT = 2,
  IMPFLOW_STATUS_DOMAIN = 3,
  IMPFLOW_STATUS_DIMENSION = 4,
  IMPFLOW_STATUS_FORMAT = 5,
  IMPFLOW_STATUS_IO = 6,
  IMPFLOW_STATUS_RUNTIME = 7,
  IMPFLOW_STATUS_OUT_OF_RANGE = 8,
  IMPFLOW_STATUS_PANIC = 9,
} ImpflowStatus;

// Opaque per-group observables handle.
typedef struct ImpflowObservables ImpflowObservables;

// Opaque eigen report handle.
typedef struct ImpflowReport ImpflowReport;

// Opaque trajectory handle.
typedef struct ImpflowTrajectory ImpflowTrajectory;

typedef struct ImpflowScalingParams {
  double eps_np;
  double eps_up;
  double gamma;
  double p;
} ImpflowScalingParams;

typedef struct ImpflowFitResult {
  struct ImpflowScalingParams params;
  double rms_residual;
  size_t iterations;
  bool converged;
} ImpflowFitResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread (empty after success).
const char *impflow_last_error(void);

// Library version as a static NUL-terminated string.
const char *impflow_version(void);

// Reads a trajectory directory (`manifest.json` plus `round_<n>.bin`).
enum ImpflowStatus impflow_trajectory_read(const char *dir, struct ImpflowTrajectory **result);

enum ImpflowStatus impflow_trajectory_round_count(const struct ImpflowTrajectory *t, size_t *count);

void impflow_trajectory_free(struct ImpflowTrajectory *t);

enum ImpflowStatus impflow_observables_from_trajectory(const struct ImpflowTrajectory *t,
                                                       struct ImpflowObservables **result);

// Builds observables from a summary CSV; `x_schedule` may be NULL.
enum ImpflowStatus impflow_observables_from_summary(const char *summary,
                                                    const char *x_schedule,
                                                    struct ImpflowObservables **result);

enum ImpflowStatus impflow_observables_shape(const struct ImpflowObservables *obs,
                                             size_t *groups,
                                             size_t *rounds);

// Magnitude share `M` of `group` at `round`.
enum ImpflowStatus impflow_observables_m(const struct ImpflowObservables *obs,
                                         size_t group,
                                         size_t round,
                                         double *value);

void impflow_observables_free(struct ImpflowObservables *obs);

// Estimates per-group exponents from the magnitude shares, using the
// sparsification schedule carried by the observables.
enum ImpflowStatus impflow_eigen_estimate(const struct ImpflowObservables *obs,
                                          double band,
                                          struct ImpflowReport **result);

enum ImpflowStatus impflow_report_group_count(const struct ImpflowReport *r, size_t *count);

// Mean exponent and its standard error for `group`; NaN where undefined.
enum ImpflowStatus impflow_report_sigma(const struct ImpflowReport *r,
                                        size_t group,
                                        double *mean,
                                        double *sem);

enum ImpflowStatus impflow_report_label(const struct ImpflowReport *r,
                                        size_t group,
                                        enum ImpflowRelevance *label);

// Writes the report as deterministic JSON.
enum ImpflowStatus impflow_report_write_json(const struct ImpflowReport *r, const char *path);

void impflow_report_free(struct ImpflowReport *r);

// Coarse-graining factor `1/(1 - x)` for a sparsification fraction in (0, 1).
enum ImpflowStatus impflow_coarse_grain_factor(double x, double *c);

enum ImpflowStatus impflow_scaling_eval(struct ImpflowScalingParams params,
                                        double d,
                                        double *value);

// Fits the scaling law to `n` points with default bounds; `starts` is the
// multi-start count (0 selects the default).
enum ImpflowStatus impflow_scaling_fit(const double *densities,
                                       const double *errors,
                                       size_t n,
                                       double dense_error,
                                       size_t starts,
                                       bool log_space,
                                       struct ImpflowFitResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMPFLOW_H */

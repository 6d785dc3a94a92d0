#ifndef EXITRATE_H
#define EXITRATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Candidate is on the non-dominated front.
#define EXR_FRONT 1

// Candidate is dominated by another.
#define EXR_DOMINATED 0

// Candidate failed the invariant-set screen; its rates are NaN.
#define EXR_EXCLUDED 2

typedef enum ExrStatus {
  EXR_STATUS_OK = 0,
  EXR_STATUS_NULL_POINTER = 1,
  EXR_STATUS_INVALID_UTF8 = 2,
  EXR_STATUS_CONFIG = 3,
  EXR_STATUS_INPUT = 4,
  EXR_STATUS_STRUCTURAL = 5,
  EXR_STATUS_DOMAIN = 6,
  EXR_STATUS_NUMERIC = 7,
  EXR_STATUS_NOT_CONVERGED = 8,
  EXR_STATUS_TAIL_STARVED = 9,
  EXR_STATUS_EMPTY_GAMMA = 10,
  EXR_STATUS_IO = 11,
  EXR_STATUS_BUFFER_TOO_SMALL = 12,
  EXR_STATUS_PANIC = 13,
  EXR_STATUS_OTHER = 14,
} ExrStatus;

// Parsed and validated run configuration.
typedef struct ExrConfig ExrConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *exr_last_error(void);

// Parse a JSON configuration. On success `*out` owns a new handle.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum ExrStatus exr_config_from_json(const char *json, struct ExrConfig **out);

// Release a handle. Null is ignored.
//
// # Safety
// `cfg` must come from [`exr_config_from_json`] and not be used afterwards.
void exr_config_free(struct ExrConfig *cfg);

// State dimension, or 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
size_t exr_config_dim(const struct ExrConfig *cfg);

// Number of control channels, or 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
size_t exr_config_channels(const struct ExrConfig *cfg);

// Number of feedback candidates, or 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
size_t exr_config_candidates(const struct ExrConfig *cfg);

// Principal Dirichlet eigenvalue of the closed loop of `candidate` on the configured grid.
//
// # Safety
// `cfg` must be a live handle and `lambda` a valid pointer.
enum ExrStatus exr_principal_eigenvalue(const struct ExrConfig *cfg,
                                        size_t candidate,
                                        double epsilon,
                                        double *lambda);

// Optimal exit rate of every channel for `candidate`, written to `rates[0..channels]`.
//
// # Safety
// `cfg` must be a live handle and `rates` must hold `len` doubles.
enum ExrStatus exr_rate_vector(const struct ExrConfig *cfg,
                               size_t candidate,
                               double epsilon,
                               double *rates,
                               size_t len);

// Monte Carlo exit rate from the configured `x0` with the configured sample
// count, step and time cap.
//
// # Safety
// `cfg` must be a live handle; `rate` and `stderr` valid pointers.
enum ExrStatus exr_simulate_exit_rate(const struct ExrConfig *cfg,
                                      size_t candidate,
                                      double epsilon,
                                      uint64_t seed,
                                      double *rate,
                                      double *stderr);

// Minimal confined action from the configured `x0` over `[0, horizon]` with `steps` steps.
//
// # Safety
// `cfg` must be a live handle and `value` a valid pointer.
enum ExrStatus exr_minimize_action(const struct ExrConfig *cfg,
                                   size_t candidate,
                                   double horizon,
                                   size_t steps,
                                   double *value);

// Rate vectors of all candidates (row-major, `candidates × channels`) and
// one [`EXR_FRONT`]/[`EXR_DOMINATED`]/[`EXR_EXCLUDED`] flag per candidate.
//
// # Safety
// `cfg` must be a live handle; `rates` must hold `rates_len` doubles and
// `flags` `flags_len` bytes.
enum ExrStatus exr_pareto_front(const struct ExrConfig *cfg,
                                double epsilon,
                                double *rates,
                                size_t rates_len,
                                uint8_t *flags,
                                size_t flags_len);

// Run a CLI subcommand (`simulate`, `eig`, `hjb`, `action`, `asymptotics`,
// `pareto`, `verify`) writing outputs under `out_dir`.
//
// # Safety
// `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings.
enum ExrStatus exr_run(const struct ExrConfig *cfg,
                       const char *command,
                       const char *out_dir,
                       uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXITRATE_H */

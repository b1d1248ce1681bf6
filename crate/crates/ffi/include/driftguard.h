#ifndef DRIFTGUARD_H
#define DRIFTGUARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  DG_STATUS_OK = 0,
  DG_STATUS_NULL_POINTER = 1,
  DG_STATUS_INVALID_UTF8 = 2,
  /**
   * Config text, field values or shapes were rejected.
   */
  DG_STATUS_CONFIG = 3,
  /**
   * The simulation itself failed.
   */
  DG_STATUS_RUN = 4,
  DG_STATUS_IO = 5,
  DG_STATUS_OUT_OF_RANGE = 6,
  DG_STATUS_PANIC = 7,
} DgStatus;

/**
 * A validated experiment configuration.
 */
typedef struct DgExperiment DgExperiment;

/**
 * Outputs of one run of the policy × seed matrix.
 */
typedef struct DgResults DgResults;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses and validates a TOML experiment config. Relative external data
 * paths resolve against the working directory.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
DgStatus dg_experiment_from_toml(const char *toml, DgExperiment **out);

/**
 * Loads a config file; relative external data paths resolve against the
 * file's directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
DgStatus dg_experiment_from_file(const char *path, DgExperiment **out);

/**
 * Replaces the seed list.
 *
 * # Safety
 * `exp` must come from this library; `seeds` must point to `n` values.
 */
DgStatus dg_experiment_set_seeds(DgExperiment *exp, const uint64_t *seeds, size_t n);

/**
 * SHA-256 of the canonical config, as a newly allocated hex string.
 *
 * # Safety
 * `exp` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_experiment_hash(const DgExperiment *exp, char **out);

/**
 * Runs every policy for every seed in memory.
 *
 * # Safety
 * `exp` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_experiment_run(const DgExperiment *exp, DgResults **out);

/**
 * Runs the experiment and writes the full output tree under `dir`.
 *
 * # Safety
 * `exp` must come from this library; `dir` must be a NUL-terminated string.
 */
DgStatus dg_experiment_write(const DgExperiment *exp, const char *dir);

/**
 * # Safety
 * `exp` must be null or come from this library, and not be used afterwards.
 */
void dg_experiment_free(DgExperiment *exp);

/**
 * Number of runs, ordered seed-major then by configured policy.
 *
 * # Safety
 * `res` must be null or come from this library.
 */
size_t dg_results_len(const DgResults *res);

/**
 * Efficiency E = A / TC of run `index`; may be +inf when no retraining ran.
 *
 * # Safety
 * `res` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_results_efficiency(const DgResults *res, size_t index, double *out);

/**
 * Mean accuracy and normalized total cost of run `index`.
 *
 * # Safety
 * `res` must come from this library; `acc` and `cost` must be valid pointers.
 */
DgStatus dg_results_metrics(const DgResults *res, size_t index, double *acc, double *cost);

/**
 * Run report of `index` as a newly allocated JSON string.
 *
 * # Safety
 * `res` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_results_report_json(const DgResults *res, size_t index, char **out);

/**
 * Cross-policy summary table as a newly allocated string.
 *
 * # Safety
 * `res` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_results_summary(const DgResults *res, char **out);

/**
 * Per-step CSV of every run as a newly allocated string.
 *
 * # Safety
 * `res` must come from this library and `out` be a valid pointer.
 */
DgStatus dg_results_steps_csv(const DgResults *res, char **out);

/**
 * # Safety
 * `res` must be null or come from this library, and not be used afterwards.
 */
void dg_results_free(DgResults *res);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string allocated by this library, freed once.
 */
void dg_string_free(char *s);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *dg_last_error(void);

/**
 * Library version as a static string.
 */
const char *dg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFTGUARD_H */

#ifndef FOCKHIER_H
#define FOCKHIER_H

/* Generated by cbindgen from the fockhier-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  FH_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FH_STATUS_NULL_POINTER = 1,
  /**
   * Text was not valid UTF-8 or the configuration was rejected.
   */
  FH_STATUS_INVALID_CONFIG = 2,
  /**
   * An argument was out of range (level, word label, ...).
   */
  FH_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The caller's buffer is too small; the required size was written.
   */
  FH_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * A solver, inverse or algebra step failed.
   */
  FH_STATUS_NUMERICAL = 5,
  /**
   * Ensemble simulation or estimation failed.
   */
  FH_STATUS_ORACLE = 6,
  FH_STATUS_IO = 7,
  FH_STATUS_PANIC = 8,
} FhStatus;

/**
 * A parsed experiment configuration.
 */
typedef struct FhExperiment FhExperiment;

/**
 * A solved generating vector with its diagnostics.
 */
typedef struct FhSolution FhSolution;

/**
 * Estimated correlation functions with standard errors.
 */
typedef struct FhTable FhTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fh_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * Returns the size including the NUL; with `len` too small (or `buf` null)
 * nothing is written.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fh_last_error_message(char *buf, size_t len);

/**
 * Parses an experiment from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out_exp` must be writable.
 */
FhStatus fh_experiment_from_toml(const char *toml, FhExperiment **out_exp);

/**
 * Overrides the coupling of a parsed experiment.
 *
 * # Safety
 * `exp` must be a live handle.
 */
FhStatus fh_experiment_set_lambda(FhExperiment *exp, double lambda);

/**
 * Releases an experiment. Null is ignored.
 *
 * # Safety
 * `exp` must be null or a handle not yet freed.
 */
void fh_experiment_free(FhExperiment *exp);

/**
 * Solves the truncated hierarchy with the configured method.
 *
 * # Safety
 * `exp` must be a live handle; `out_sol` must be writable.
 */
FhStatus fh_solve(const FhExperiment *exp, FhSolution **out_sol);

/**
 * # Safety
 * `sol` must be null or a handle not yet freed.
 */
void fh_solution_free(FhSolution *sol);

/**
 * Number of base labels `d` and truncation level `L`.
 *
 * # Safety
 * `sol` must be a live handle; the out pointers must be writable.
 */
FhStatus fh_solution_shape(const FhSolution *sol, size_t *out_d, size_t *out_max_level);

/**
 * Highest level free of truncation effects; `-1` when none is.
 *
 * # Safety
 * `sol` must be a live handle; `out_level` must be writable.
 */
FhStatus fh_solution_trusted_levels(const FhSolution *sol, int *out_level);

/**
 * Largest hierarchy residual over the trusted levels.
 *
 * # Safety
 * `sol` must be a live handle; `out_residual` must be writable.
 */
FhStatus fh_solution_max_residual(const FhSolution *sol, double *out_residual);

/**
 * Copies level `level` (`d^level` values, slot 1 most significant) into
 * `buf`. `out_len` receives the length; a null `buf` only queries it.
 *
 * # Safety
 * `sol` must be a live handle; `buf` must be null or hold `len` doubles.
 */
FhStatus fh_solution_level(const FhSolution *sol,
                           size_t level,
                           double *buf,
                           size_t len,
                           size_t *out_len);

/**
 * Full solve report as JSON text; see [`fh_last_error_message`] for the
 * buffer protocol.
 *
 * # Safety
 * `sol` must be a live handle; `buf` must be null or hold `len` bytes.
 */
FhStatus fh_solution_json(const FhSolution *sol, char *buf, size_t len, size_t *out_needed);

/**
 * Simulates the configured ensemble and estimates correlations.
 *
 * # Safety
 * `exp` must be a live handle; `out_table` must be writable.
 */
FhStatus fh_oracle_run(const FhExperiment *exp, FhTable **out_table);

/**
 * # Safety
 * `table` must be null or a handle not yet freed.
 */
void fh_table_free(FhTable *table);

/**
 * Estimate for the word `labels[0..n]` (order does not matter).
 *
 * # Safety
 * `table` must be a live handle; `labels` must hold `n` values (may be null
 * when `n` is 0); the out pointers must be writable.
 */
FhStatus fh_table_get(const FhTable *table,
                      const size_t *labels,
                      size_t n,
                      double *out_value,
                      double *out_stderr);

/**
 * Runs solver and oracle and compares them word by word. `out_pass` is 1
 * when every compared word is within tolerance.
 *
 * # Safety
 * `exp` must be a live handle; the out pointers must be writable.
 */
FhStatus fh_compare(const FhExperiment *exp, int *out_pass, double *out_max_abs_diff);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOCKHIER_H */

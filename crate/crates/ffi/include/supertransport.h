#ifndef SUPERTRANSPORT_H
#define SUPERTRANSPORT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = 1,
  ST_STATUS_INVALID_UTF8 = 2,
  /**
   * Scenario document or option is invalid.
   */
  ST_STATUS_CONFIG = 3,
  /**
   * A check could not be evaluated.
   */
  ST_STATUS_RUNTIME = 4,
  /**
   * Expression syntax error.
   */
  ST_STATUS_PARSE = 5,
  /**
   * Expression evaluation failed.
   */
  ST_STATUS_EVAL = 6,
  /**
   * Internal panic caught at the boundary.
   */
  ST_STATUS_PANIC = 7,
} StStatus;

/**
 * Opaque scalar expression.
 */
typedef struct StExpr StExpr;

/**
 * Opaque validated scenario.
 */
typedef struct StScenario StScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread. Valid until the next call on the thread.
 */
const char *st_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *st_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void st_string_free(char *s);

/**
 * Parses and validates a scenario document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum StStatus st_scenario_from_json(const char *json, struct StScenario **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum StStatus st_scenario_from_file(const char *path, struct StScenario **out);

/**
 * # Safety
 * `sc` must be NULL or a handle from `st_scenario_from_*` that has not been freed.
 */
void st_scenario_free(struct StScenario *sc);

/**
 * Runs `suite` (`check-flat`, `transport`, …, `all`) and returns the JSON report.
 * `*all_pass` is set to 1 when every check passed and 0 otherwise.
 *
 * # Safety
 * `sc` must be a live scenario handle, `suite` a NUL-terminated string, and
 * `report_json` and `all_pass` valid pointers.
 */
enum StStatus st_run(const struct StScenario *sc,
                     const char *suite,
                     uint64_t seed,
                     char **report_json,
                     int32_t *all_pass);

/**
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum StStatus st_expr_parse(const char *text, struct StExpr **out);

/**
 * Evaluates at the point `names[i] = values[i]`, `i < n`.
 *
 * # Safety
 * `expr` must be a live handle; `names` and `values` must point to `n` entries
 * (they may be NULL when `n == 0`); `out` must be a valid pointer.
 */
enum StStatus st_expr_eval(const struct StExpr *expr,
                           const char *const *names,
                           const double *values,
                           size_t n,
                           double *out);

/**
 * Partial derivative with respect to `var`, as a new handle.
 *
 * # Safety
 * `expr` must be a live handle, `var` a NUL-terminated string, `out` a valid pointer.
 */
enum StStatus st_expr_diff(const struct StExpr *expr, const char *var, struct StExpr **out);

/**
 * Canonical text of the expression; free with [`st_string_free`].
 *
 * # Safety
 * `expr` must be a live handle and `out` a valid pointer.
 */
enum StStatus st_expr_to_string(const struct StExpr *expr, char **out);

/**
 * # Safety
 * `expr` must be NULL or a live handle.
 */
void st_expr_free(struct StExpr *expr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPERTRANSPORT_H */

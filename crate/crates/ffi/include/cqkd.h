#ifndef CQKD_H
#define CQKD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of detector channels, in the order D1H, D1V, D2, D3H, D3V.
 */
#define CQKD_CHANNELS 5

typedef enum CqkdStatus {
  CQKD_STATUS_OK = 0,
  CQKD_STATUS_NULL_POINTER = 1,
  CQKD_STATUS_INVALID_UTF8 = 2,
  /**
   * Missing config, schema violation or malformed override.
   */
  CQKD_STATUS_CONFIG_ERROR = 3,
  /**
   * A value out of its allowed range.
   */
  CQKD_STATUS_PARAMETER_ERROR = 4,
  CQKD_STATUS_RUNTIME_ERROR = 5,
  CQKD_STATUS_PANIC = 6,
} CqkdStatus;

/**
 * Scenario configuration handle.
 */
typedef struct CqkdConfig CqkdConfig;

/**
 * Run report handle.
 */
typedef struct CqkdReport CqkdReport;

typedef struct CqkdSummary {
  uint64_t n_slots;
  uint64_t sifted_bits;
  uint64_t sifted_errors;
  /**
   * False when nothing was sifted; `qber` is then 0.
   */
  bool has_qber;
  double qber;
  double key_rate;
  double d1_rate;
  double session_seconds;
  uint64_t total_counts;
  uint64_t d2_same;
  uint64_t d2_diff;
  uint64_t d3_same;
  uint64_t d3_diff;
  uint64_t multiple;
} CqkdSummary;

typedef struct CqkdErrorBudget {
  double e_dark;
  double e_afterpulse;
  double e_extinction;
  double e_visibility;
  double e_total;
} CqkdErrorBudget;

typedef struct CqkdLockSummary {
  double duration_s;
  uint64_t samples;
  double effective_visibility;
  double fraction_in_lock;
  double rms_delta_rad;
  double max_abs_volts;
  uint64_t saturated_samples;
} CqkdLockSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cqkd_version(void);

/**
 * Message of the last failure on this thread; empty if none. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *cqkd_last_error_message(void);

/**
 * Loads a config by path or bundled name (`fiber1km_mu05`, ...).
 *
 * # Safety
 * `name` must be a valid C string and `out` a valid pointer.
 */
enum CqkdStatus cqkd_config_load(const char *name, struct CqkdConfig **out);

/**
 * Parses a config from TOML text.
 *
 * # Safety
 * `toml` must be a valid C string and `out` a valid pointer.
 */
enum CqkdStatus cqkd_config_from_toml(const char *toml, struct CqkdConfig **out);

/**
 * Applies one `key=value` override. The config is unchanged on failure.
 *
 * # Safety
 * `cfg` must come from this library; `spec` must be a valid C string.
 */
enum CqkdStatus cqkd_config_set(struct CqkdConfig *cfg, const char *spec);

/**
 * Serializes the config back to TOML. Free the result with `cqkd_string_free`.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_config_to_toml(const struct CqkdConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used afterwards.
 */
void cqkd_config_free(struct CqkdConfig *cfg);

/**
 * Runs the session described by `cfg`.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_run(const struct CqkdConfig *cfg, struct CqkdReport **out);

/**
 * # Safety
 * `report` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_report_summary(const struct CqkdReport *report, struct CqkdSummary *out);

/**
 * Writes per-channel click counts, D1H, D1V, D2, D3H, D3V, into `out`,
 * which must hold `len >= CQKD_CHANNELS` values.
 *
 * # Safety
 * `report` must come from this library; `out` must point to `len` writable values.
 */
enum CqkdStatus cqkd_report_channel_counts(const struct CqkdReport *report,
                                           uint64_t *out,
                                           size_t len);

/**
 * Full report as JSON. Free the result with `cqkd_string_free`.
 *
 * # Safety
 * `report` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_report_to_json(const struct CqkdReport *report, char **out);

/**
 * # Safety
 * `report` must come from this library or be null; it must not be used afterwards.
 */
void cqkd_report_free(struct CqkdReport *report);

/**
 * Analytic error budget. A `d1_rate` of zero or less uses the analytic
 * D1 rate estimate for the config.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_error_budget(const struct CqkdConfig *cfg,
                                  double d1_rate,
                                  struct CqkdErrorBudget *out);

/**
 * Simulates the phase lock for `duration_s` seconds. `feedback` is 1 for
 * on, 0 for off, negative to keep the config's setting.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum CqkdStatus cqkd_lock(const struct CqkdConfig *cfg,
                          double duration_s,
                          int32_t feedback,
                          uint64_t seed,
                          struct CqkdLockSummary *out);

/**
 * # Safety
 * `s` must be a string returned by this library or null.
 */
void cqkd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CQKD_H */

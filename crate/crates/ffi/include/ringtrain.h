#ifndef RINGTRAIN_H
#define RINGTRAIN_H

/* Generated by cbindgen during the ringtrain-ffi build; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum RtStatus {
  RT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RT_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  RT_STATUS_INVALID_UTF8 = 2,
  /**
   * Configuration text failed to parse or validate.
   */
  RT_STATUS_BAD_CONFIG = 3,
  /**
   * Training failed to run (worker error, transport failure).
   */
  RT_STATUS_TRAIN_FAILED = 4,
  /**
   * Log text failed to parse.
   */
  RT_STATUS_BAD_LOG = 5,
  /**
   * A panic was caught at the boundary; details via rt_last_error.
   */
  RT_STATUS_INTERNAL = 6,
} RtStatus;

/**
 * Training configuration. Build from TOML text; defaults mirror the CLI.
 */
typedef struct RtConfig RtConfig;

/**
 * Everything a finished run exposes: metrics, the event log, and the
 * per-iteration CSV.
 */
typedef struct RtRun RtRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the most recent failing call on this thread. Empty string
 * when nothing failed yet; the pointer is invalidated by the next failure.
 */
const char *rt_last_error(void);

/**
 * Library version as a static string.
 */
const char *rt_version(void);

/**
 * A configuration with every field at its default.
 */
struct RtConfig *rt_config_default(void);

/**
 * Parses and validates TOML configuration text. Returns null on failure;
 * rt_last_error carries the reason.
 */
struct RtConfig *rt_config_from_toml(const char *text);

void rt_config_free(struct RtConfig *cfg);

/**
 * Runs training to completion on the calling thread (workers spawn
 * internally). A diverged run still returns `Ok` with a result handle;
 * check rt_run_diverged.
 */
enum RtStatus rt_train(const struct RtConfig *cfg, struct RtRun **out);

void rt_run_free(struct RtRun *run);

/**
 * Last evaluation accuracy, NaN when the run never evaluated.
 */
double rt_run_final_accuracy(const struct RtRun *run);

/**
 * Wall-clock seconds between the run's start and final log events.
 */
double rt_run_elapsed_seconds(const struct RtRun *run);

/**
 * Optimizer steps applied before the run finished or aborted.
 */
uint64_t rt_run_updates(const struct RtRun *run);

bool rt_run_diverged(const struct RtRun *run);

/**
 * The run's event log; owned by the handle.
 */
const char *rt_run_log(const struct RtRun *run);

/**
 * The run's per-iteration metrics as CSV; owned by the handle.
 */
const char *rt_run_csv(const struct RtRun *run);

/**
 * Parses event-log text. `elapsed_seconds` gets run_start to run_final;
 * `final_accuracy` gets the last eval_accuracy value, NaN when the log has
 * none.
 */
enum RtStatus rt_parse_log(const char *text, double *elapsed_seconds, double *final_accuracy);

/**
 * Times one simulated training iteration at the given world size and
 * reports its weak-scaling efficiency against one worker. `toml` uses the
 * simulator's flat configuration; an empty string means the built-in
 * calibration numbers.
 */
enum RtStatus rt_simulate(const char *toml,
                          uint32_t world,
                          double *iteration_us,
                          double *efficiency);

/**
 * Converts `len` f32 values to round-to-nearest-even half precision bits.
 */
enum RtStatus rt_quantize_fp16(const float *src, size_t len, uint16_t *dst);

/**
 * Converts `len` half precision bit patterns back to f32.
 */
enum RtStatus rt_dequantize_fp16(const uint16_t *src, size_t len, float *dst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RINGTRAIN_H */

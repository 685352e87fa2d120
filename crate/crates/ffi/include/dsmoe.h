#ifndef DSMOE_H
#define DSMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsmoeStatus {
  DSMOE_STATUS_OK = 0,
  DSMOE_STATUS_NULL_POINTER = 1,
  DSMOE_STATUS_INVALID_UTF8 = 2,
  DSMOE_STATUS_IO = 3,
  DSMOE_STATUS_CHECKPOINT = 4,
  DSMOE_STATUS_CONFIG = 5,
  /**
   * Unknown token, unbalanced markers or empty input.
   */
  DSMOE_STATUS_INPUT = 6,
  DSMOE_STATUS_NUMERIC = 7,
  DSMOE_STATUS_BUFFER_TOO_SMALL = 8,
  DSMOE_STATUS_INTERNAL = 9,
} DsmoeStatus;

/**
 * Opaque model handle.
 */
typedef struct DsmoeModel DsmoeModel;

/**
 * Summary of one inference.
 */
typedef struct DsmoeInference {
  uint32_t predicted;
  /**
   * Chain length chosen by the router.
   */
  uint32_t k;
  /**
   * Steps actually executed.
   */
  uint32_t steps;
  double complexity;
  uint64_t routing_macs;
  uint64_t total_macs;
} DsmoeInference;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a model saved by the `train` command.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum DsmoeStatus dsmoe_model_load(const char *dir, struct DsmoeModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dsmoe_model_load`] and not be used afterwards.
 */
void dsmoe_model_free(struct DsmoeModel *model);

/**
 * Classify `text` and summarise the executed chain.
 *
 * # Safety
 * All pointers must be valid; `text` NUL-terminated.
 */
enum DsmoeStatus dsmoe_infer(const struct DsmoeModel *model,
                             const char *text,
                             struct DsmoeInference *out);

/**
 * Full chain trace of `text` as JSON into `buf`. `needed` receives the
 * byte length including the terminator, also when `buf` is too small.
 *
 * # Safety
 * `buf` must hold `len` bytes (it may be null when `len` is 0).
 */
enum DsmoeStatus dsmoe_trace_json(const struct DsmoeModel *model,
                                  const char *text,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * Complexity score of `text` under unit feature weights, or under the
 * model's learned weights when `model` is non-null.
 *
 * # Safety
 * `text` NUL-terminated, `out` valid; `model` null or a live handle.
 */
enum DsmoeStatus dsmoe_complexity(const struct DsmoeModel *model, const char *text, double *out);

/**
 * Copy the calling thread's last error message into `buf`. Returns the
 * length including the terminator; nothing is written if `len` is smaller.
 *
 * # Safety
 * `buf` must hold `len` bytes (it may be null when `len` is 0).
 */
size_t dsmoe_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSMOE_H */

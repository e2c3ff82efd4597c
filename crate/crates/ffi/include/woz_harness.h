#ifndef WOZ_HARNESS_H
#define WOZ_HARNESS_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WozStatus {
  WOZ_STATUS_OK = 0,
  WOZ_STATUS_NULL_POINTER = 1,
  WOZ_STATUS_INVALID_UTF8 = 2,
  WOZ_STATUS_INVALID_ARGUMENT = 3,
  WOZ_STATUS_RUN_NOT_ACTIVE = 4,
  WOZ_STATUS_RUN_NOT_STOPPED = 5,
  WOZ_STATUS_REJECTED = 6,
  WOZ_STATUS_NO_SAMPLES = 7,
  WOZ_STATUS_PANIC = 99,
} WozStatus;

/**
 * Opaque run handle.
 */
typedef struct WozRun WozRun;

/**
 * One ping exchange: `t1`/`t4` on the requester clock, `t2`/`t3` on the
 * responder clock, all in ms.
 */
typedef struct WozPingSample {
  int64_t t1;
  int64_t t2;
  int64_t t3;
  int64_t t4;
} WozPingSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a running pilot run started at `start_ms`. `role` is
 * `single_user`, `wizard`, or `observer`. `seed` fixes the identifiers.
 *
 * # Safety
 * String arguments are NUL-terminated; `out` points to writable storage.
 */
enum WozStatus woz_run_new(const char *participant,
                           const char *role,
                           const char *instance,
                           int64_t start_ms,
                           uint64_t seed,
                           struct WozRun **out);

/**
 * # Safety
 * `run` is null or a handle from `woz_run_new` not freed before.
 */
void woz_run_free(struct WozRun *run);

/**
 * Records a live annotation of `kind` (e.g. `correct`, `counter`,
 * `custom:target_change`) at `event_ms`. `note` may be null. Kinds that
 * carry images or transcripts are rejected.
 *
 * # Safety
 * `run` is a live handle; strings are NUL-terminated.
 */
enum WozStatus woz_run_record(struct WozRun *run,
                              const char *kind,
                              int64_t event_ms,
                              const char *note);

/**
 * # Safety
 * `run` is a live handle.
 */
enum WozStatus woz_run_stop(struct WozRun *run, int64_t at_ms);

/**
 * Number of annotations in the run; 0 for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
size_t woz_run_annotation_count(const struct WozRun *run);

/**
 * Live statistics as JSON with sorted keys.
 *
 * # Safety
 * `run` is a live handle; `out` points to writable storage.
 */
enum WozStatus woz_run_stats_json(struct WozRun *run, char **out);

/**
 * Canonical CSV export of the whole log.
 *
 * # Safety
 * `run` is a live handle; `out` points to writable storage.
 */
enum WozStatus woz_run_export_csv(struct WozRun *run, char **out);

/**
 * Offset (responder minus requester) and RTT of the minimum-RTT sample.
 *
 * # Safety
 * `samples` points to `len` readable samples; the out pointers are writable.
 */
enum WozStatus woz_estimate_offset(const struct WozPingSample *samples,
                                   size_t len,
                                   double *out_offset_ms,
                                   int64_t *out_rtt_ms);

/**
 * # Safety
 * `s` is null or a string returned by this library, not freed before.
 */
void woz_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *woz_last_error(void);

const char *woz_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WOZ_HARNESS_H */

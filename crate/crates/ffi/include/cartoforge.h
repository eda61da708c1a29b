#ifndef CARTOFORGE_H
#define CARTOFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_ARGUMENT = 2,
  CF_STATUS_PARSE = 3,
  CF_STATUS_IO = 4,
  CF_STATUS_NOT_FOUND = 5,
  CF_STATUS_CONFLICT = 6,
  CF_STATUS_PANIC = 7,
} CfStatus;

/*
 Per-epoch prediction log handle.
 */
typedef struct CfPredictionLog CfPredictionLog;

/*
 Review store handle.
 */
typedef struct CfReviewStore CfReviewStore;

/*
 Message of the last failed call on this thread, or NULL. The pointer is
 valid until the next call into the library on the same thread.
 */
const char *cf_last_error_message(void);

/*
 Library version, a static string.
 */
const char *cf_version(void);

/*
 # Safety
 `s` must come from this library and not have been freed yet. NULL is a no-op.
 */
void cf_string_free(char *s);

/*
 Max over label columns of the population std across epochs. `probs` is
 row-major, `epochs` rows of `labels` values, each row summing to 1.

 # Safety
 `probs` must point to `epochs * labels` doubles; `out` must be writable.
 */
enum CfStatus cf_estimated_max_variability(const double *probs,
                                           uintptr_t epochs,
                                           uintptr_t labels,
                                           double *out);

/*
 # Safety
 `values` must point to `n` doubles; `out` must be writable.
 */
enum CfStatus cf_population_std(const double *values, uintptr_t n, double *out);

/*
 Cohen's kappa over `n` label pairs given as label indices
 (0 entailment, 1 neutral, 2 contradiction).

 # Safety
 `first` and `second` must point to `n` bytes each; `out` must be writable.
 */
enum CfStatus cf_cohens_kappa(const uint8_t *first,
                              const uint8_t *second,
                              uintptr_t n,
                              double *out);

/*
 Lowercased, punctuation-free, whitespace-collapsed copy of `text`.
 Free the result with `cf_string_free`.

 # Safety
 `text` must be a NUL-terminated string; `out` must be writable.
 */
enum CfStatus cf_normalize_for_compare(const char *text, char **out);

/*
 Reads a prediction log file (JSONL: a header line, then one line per example).

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CfStatus cf_prediction_log_read(const char *path, struct CfPredictionLog **out);

/*
 Number of examples in the log; 0 for NULL.

 # Safety
 `log` must be NULL or a live handle.
 */
uintptr_t cf_prediction_log_len(const struct CfPredictionLog *log);

/*
 Data map of the log as a JSON array. Free the result with `cf_string_free`.

 # Safety
 `log` must be a live handle; `out` must be writable.
 */
enum CfStatus cf_prediction_log_data_map_json(const struct CfPredictionLog *log, char **out);

/*
 # Safety
 `log` must be NULL or a handle not freed before.
 */
void cf_prediction_log_free(struct CfPredictionLog *log);

/*
 Opens a review store persisted under `dir`, or an in-memory one when
 `dir` is NULL. `lease_ms` of 0 selects the 30 minute default.

 # Safety
 `dir` must be NULL or a NUL-terminated string; `out` must be writable.
 */
enum CfStatus cf_review_store_open(const char *dir, uint64_t lease_ms, struct CfReviewStore **out);

/*
 # Safety
 `store` must be NULL or a handle not freed before.
 */
void cf_review_store_free(struct CfReviewStore *store);

/*
 Imports examples given as JSONL (one example object per line).

 # Safety
 `store` must be a live handle, `jsonl` a NUL-terminated string, and
 `imported` NULL or writable.
 */
enum CfStatus cf_review_store_import_jsonl(const struct CfReviewStore *store,
                                           const char *jsonl,
                                           uintptr_t *imported);

/*
 Assigns the next task to `worker` and writes it as JSON to `out`, or
 writes NULL when nothing is available.

 # Safety
 `store` must be a live handle, `worker` a NUL-terminated string, `out` writable.
 */
enum CfStatus cf_review_store_next_task(const struct CfReviewStore *store,
                                        const char *worker,
                                        char **out);

/*
 Submits one annotation record given as JSON.

 # Safety
 `store` must be a live handle and `record_json` a NUL-terminated string.
 */
enum CfStatus cf_review_store_submit(const struct CfReviewStore *store, const char *record_json);

/*
 Records of completed tasks as JSONL. Free the result with `cf_string_free`.

 # Safety
 `store` must be a live handle; `out` must be writable.
 */
enum CfStatus cf_review_store_export_jsonl(const struct CfReviewStore *store, char **out);

#endif  /* CARTOFORGE_H */

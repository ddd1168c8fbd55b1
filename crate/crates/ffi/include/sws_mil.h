#ifndef SWS_MIL_H
#define SWS_MIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SwsStatus {
  SWS_STATUS_OK = 0,
  SWS_STATUS_NULL_POINTER = 1,
  SWS_STATUS_INVALID_UTF8 = 2,
  SWS_STATUS_FORMAT = 3,
  SWS_STATUS_INTEGRITY = 4,
  SWS_STATUS_DATA = 5,
  SWS_STATUS_DOMAIN = 6,
  SWS_STATUS_DIMENSION = 7,
  SWS_STATUS_NUMERIC = 8,
  SWS_STATUS_CONTRACT = 9,
  SWS_STATUS_SPLIT = 10,
  SWS_STATUS_RECYCLE = 11,
  SWS_STATUS_CONFIG = 12,
  SWS_STATUS_ORACLE = 13,
  SWS_STATUS_IO = 14,
  SWS_STATUS_BUFFER_TOO_SMALL = 15,
  SWS_STATUS_PANIC = 16,
} SwsStatus;

/**
 * Opaque dataset handle.
 */
typedef struct SwsDataset SwsDataset;

/**
 * Opaque model handle: parameters plus the seed and round stored with them.
 */
typedef struct SwsModel SwsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *sws_last_error(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void sws_string_free(char *s);

/**
 * Loads a feature store directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SwsStatus sws_dataset_load(const char *dir, struct SwsDataset **out);

/**
 * Generates the built-in binary benchmark with the given seed.
 *
 * # Safety
 * `out` must be writable.
 */
enum SwsStatus sws_dataset_synth_default(uint64_t seed, struct SwsDataset **out);

/**
 * Writes a dataset as a feature store directory.
 *
 * # Safety
 * `ds` must be a live dataset handle; `dir` a NUL-terminated string.
 */
enum SwsStatus sws_dataset_save(const struct SwsDataset *ds, const char *dir);

/**
 * Number of bags; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t sws_dataset_len(const struct SwsDataset *ds);

/**
 * Feature dimension; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t sws_dataset_dim(const struct SwsDataset *ds);

/**
 * Number of classes; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t sws_dataset_num_classes(const struct SwsDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library that was not yet freed.
 */
void sws_dataset_free(struct SwsDataset *ds);

/**
 * Higher-priority of two class indices under the dataset's priority.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must be writable.
 */
enum SwsStatus sws_max_priority_label(const struct SwsDataset *ds, size_t a, size_t b, size_t *out);

/**
 * Trains on the dataset. `config_json` is a JSON object of config keys or
 * NULL for defaults. On success `out_model` receives the best-round model
 * and `out_report` (if non-NULL) the report as JSON.
 *
 * # Safety
 * Pointers must be valid; `config_json` NULL or NUL-terminated.
 */
enum SwsStatus sws_train(const struct SwsDataset *ds,
                         const char *config_json,
                         struct SwsModel **out_model,
                         char **out_report);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum SwsStatus sws_model_load(const char *path, struct SwsModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum SwsStatus sws_model_save(const struct SwsModel *model, const char *path);

/**
 * Feature dimension the model expects; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t sws_model_dim(const struct SwsModel *model);

/**
 * Number of classes; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t sws_model_num_classes(const struct SwsModel *model);

/**
 * Predicts one bag of `n` row-major instances of dimension `d`.
 *
 * `probs` receives `probs_len` (≥ number of classes) probabilities;
 * `attention`, if non-NULL, receives `n` weights; `label` the argmax class.
 *
 * # Safety
 * `features` must hold `n * d` floats; output buffers must have the sizes
 * stated above.
 */
enum SwsStatus sws_model_predict(const struct SwsModel *model,
                                 const float *features,
                                 size_t n,
                                 size_t d,
                                 double *probs,
                                 size_t probs_len,
                                 double *attention,
                                 size_t *label);

/**
 * Evaluates on `split` ("train", "val" or "test"); `out_json` receives the
 * evaluation (metrics and per-bag predictions).
 *
 * # Safety
 * Handles must be live; `split` NUL-terminated; `out_json` writable.
 */
enum SwsStatus sws_evaluate(const struct SwsModel *model,
                            const struct SwsDataset *ds,
                            const char *split,
                            char **out_json);

/**
 * # Safety
 * `model` must be NULL or a handle from this library that was not yet freed.
 */
void sws_model_free(struct SwsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWS_MIL_H */

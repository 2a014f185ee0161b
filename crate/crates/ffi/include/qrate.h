#ifndef QRATE_H
#define QRATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; the values match the command-line exit codes.
typedef enum QrateStatus {
  QRATE_STATUS_OK = 0,
  QRATE_STATUS_INTERNAL = 1,
  QRATE_STATUS_INVALID_ARGUMENT = 2,
  QRATE_STATUS_IO = 3,
  QRATE_STATUS_INVALID_INPUT = 4,
  QRATE_STATUS_DIVERGED = 5,
  QRATE_STATUS_CONFIG = 6,
  QRATE_STATUS_NULL_POINTER = 7,
  QRATE_STATUS_PANIC = 8,
} QrateStatus;

// A loaded rating model with the word vectors it needs.
typedef struct QrateModel QrateModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library from the same thread.
const char *qrate_last_error(void);

// Library version as a static NUL-terminated string.
const char *qrate_version(void);

// Load a rating-model checkpoint. `glove_path` may be null for models that
// do not use word vectors. On success `*out` owns a handle to release with
// [`qrate_model_free`].
//
// # Safety
// Pointers must be null or valid NUL-terminated strings; `out` must be writable.
enum QrateStatus qrate_model_load(const char *checkpoint_path,
                                  const char *glove_path,
                                  struct QrateModel **out);

// Release a handle from [`qrate_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a live handle not used afterwards.
void qrate_model_free(struct QrateModel *model);

// Width of the model's prediction-head input.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum QrateStatus qrate_model_input_width(const struct QrateModel *model, size_t *out);

// Predicted rating of one question given as JSON.
//
// # Safety
// `model` must be a live handle, `question_json` a NUL-terminated string and
// `out` writable.
enum QrateStatus qrate_model_predict(const struct QrateModel *model,
                                     const char *question_json,
                                     double *out);

// Row-major 7×7 component attention (rows and columns: stem, answer, D1–D4,
// explanation) into `out[0..49]`. Fails with `QRATE_STATUS_CONFIG` for
// models without it.
//
// # Safety
// As for [`qrate_model_predict`]; `out` must hold 49 doubles.
enum QrateStatus qrate_model_attention(const struct QrateModel *model,
                                       const char *question_json,
                                       double *out);

// The 18 explicit features of a question, unnormalised, into `out[0..18]`.
//
// # Safety
// `question_json` must be a NUL-terminated string and `out` hold 18 doubles.
enum QrateStatus qrate_extract_features(const char *question_json, double *out);

// Mean squared error and the share of predictions within 0.25 of the label.
//
// # Safety
// `predictions` and `labels` must hold `n` doubles; `mse` and `acc` writable.
enum QrateStatus qrate_evaluate(const double *predictions,
                                const double *labels,
                                size_t n,
                                double *mse,
                                double *acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QRATE_H */

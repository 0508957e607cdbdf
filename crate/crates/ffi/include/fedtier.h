#ifndef FEDTIER_H
#define FEDTIER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes for every fallible call.
typedef enum FtStatus {
  FT_STATUS_OK = 0,
  FT_STATUS_NULL_POINTER = 1,
  FT_STATUS_INVALID_ARGUMENT = 2,
  FT_STATUS_CODEC = 3,
  FT_STATUS_CONFIG = 4,
  FT_STATUS_DATA = 5,
  FT_STATUS_RUNTIME = 6,
  FT_STATUS_BUFFER_TOO_SMALL = 7,
  FT_STATUS_PANIC = 8,
} FtStatus;

// A labeled image set (normalized pixels).
typedef struct FtDataset FtDataset;

// Per-round metrics of a finished experiment.
typedef struct FtMetrics FtMetrics;

// Parameters of the reference CNN.
typedef struct FtParams FtParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ft_version(void);

// Message for the last failed call on this thread; empty after a success.
// Valid until the next library call on the same thread.
const char *ft_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void ft_string_free(char *s);

// Seeded initial parameters of the reference CNN.
//
// # Safety
// `out` must be a valid pointer to write a handle to.
enum FtStatus ft_params_init(uint64_t seed, struct FtParams **out);

// Releases a parameter handle. Null is ignored.
//
// # Safety
// `params` must come from this library and not have been freed.
void ft_params_free(struct FtParams *params);

// Number of scalar values held by `params`, or 0 for null.
//
// # Safety
// `params` must be null or a live handle.
size_t ft_params_value_count(const struct FtParams *params);

// Size in bytes of the wire encoding of `params`, or 0 for null.
//
// # Safety
// `params` must be null or a live handle.
size_t ft_params_encoded_len(const struct FtParams *params);

// Writes the wire encoding into `buf`. `written` receives the encoded size
// even when `cap` is too small (status `BUFFER_TOO_SMALL`).
//
// # Safety
// `buf` must point to `cap` writable bytes; `written` must be writable.
enum FtStatus ft_params_encode(const struct FtParams *params,
                               uint8_t *buf,
                               size_t cap,
                               size_t *written);

// Decodes reference-CNN parameters from their wire encoding.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum FtStatus ft_params_decode(const uint8_t *bytes, size_t len, struct FtParams **out);

// Weighted average of `n` parameter sets. Weights must be positive.
//
// # Safety
// `params` and `weights` must each point to `n` elements; `out` must be writable.
enum FtStatus ft_params_fedavg(const struct FtParams *const *params,
                               const double *weights,
                               size_t n,
                               struct FtParams **out);

// Accuracy of `params` on `data`, in [0, 1].
//
// # Safety
// Handles must be live; `out` must be writable.
enum FtStatus ft_params_evaluate(const struct FtParams *params,
                                 const struct FtDataset *data,
                                 double *out);

// Cosine similarity in [0, 1] of two 10-bin label histograms.
//
// # Safety
// `hist_a` and `hist_b` must each point to 10 doubles; `out` must be writable.
enum FtStatus ft_profile_similarity(const double *hist_a, const double *hist_b, double *out);

// Loads the four MNIST IDX files from `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string; `train` and `test` must be writable.
enum FtStatus ft_dataset_load_mnist(const char *dir,
                                    struct FtDataset **train,
                                    struct FtDataset **test);

// Seeded synthetic digit-like images; labels cycle through 0..9.
//
// # Safety
// `out` must be writable.
enum FtStatus ft_dataset_synthetic(size_t n, uint64_t seed, struct FtDataset **out);

// Number of images in `data`, or 0 for null.
//
// # Safety
// `data` must be null or a live handle.
size_t ft_dataset_len(const struct FtDataset *data);

// Releases a dataset handle. Null is ignored.
//
// # Safety
// `data` must come from this library and not have been freed.
void ft_dataset_free(struct FtDataset *data);

// Runs the experiment described by `config_json` on the given data.
//
// # Safety
// `config_json` must be NUL-terminated; handles must be live; `out` writable.
enum FtStatus ft_run_experiment(const char *config_json,
                                const struct FtDataset *train,
                                const struct FtDataset *test,
                                struct FtMetrics **out);

// Number of recorded rounds, or 0 for null.
//
// # Safety
// `metrics` must be null or a live handle.
size_t ft_metrics_round_count(const struct FtMetrics *metrics);

// Accuracy of `client_id` after round `round` (1-based).
//
// # Safety
// `metrics` must be a live handle; `out` must be writable.
enum FtStatus ft_metrics_accuracy(const struct FtMetrics *metrics,
                                  uint64_t round,
                                  uint64_t client_id,
                                  double *out);

// Metrics as CSV text. Free with [`ft_string_free`].
//
// # Safety
// `metrics` must be a live handle; `out` must be writable.
enum FtStatus ft_metrics_to_csv(const struct FtMetrics *metrics, char **out);

// Metrics as JSON text. Free with [`ft_string_free`].
//
// # Safety
// `metrics` must be a live handle; `out` must be writable.
enum FtStatus ft_metrics_to_json(const struct FtMetrics *metrics, char **out);

// Releases a metrics handle. Null is ignored.
//
// # Safety
// `metrics` must come from this library and not have been freed.
void ft_metrics_free(struct FtMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDTIER_H */

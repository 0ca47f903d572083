#ifndef PRUNELAB_H
#define PRUNELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrunelabStatus {
  PRUNELAB_STATUS_OK = 0,
  PRUNELAB_STATUS_NULL_POINTER = 1,
  PRUNELAB_STATUS_INVALID_ARGUMENT = 2,
  PRUNELAB_STATUS_NOT_FOUND = 3,
  PRUNELAB_STATUS_IO = 4,
  PRUNELAB_STATUS_CORRUPT = 5,
  PRUNELAB_STATUS_INCOMPATIBLE = 6,
  PRUNELAB_STATUS_CONFIG = 7,
  PRUNELAB_STATUS_TRAINING = 8,
  PRUNELAB_STATUS_BUFFER_TOO_SMALL = 9,
  PRUNELAB_STATUS_PANIC = 10,
} PrunelabStatus;

typedef enum PrunelabScope {
  PRUNELAB_SCOPE_MATRIX_LOCAL = 0,
  PRUNELAB_SCOPE_GLOBAL = 1,
  PRUNELAB_SCOPE_PER_HEAD = 2,
} PrunelabScope;

/**
 * One keep/prune mask per prunable matrix.
 */
typedef struct PrunelabMasks PrunelabMasks;

/**
 * Encoder weights, optionally with a classification head.
 */
typedef struct PrunelabModel PrunelabModel;

typedef struct PrunelabModelConfig {
  size_t num_layers;
  size_t hidden;
  size_t num_heads;
  size_t ffn;
  size_t vocab;
  size_t max_len;
  float dropout;
  float init_std;
} PrunelabModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *prunelab_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the buffer size needed for
 * the whole message including the terminator, or 0 when there is no error.
 */
size_t prunelab_last_error_message(char *buf, size_t len);

/**
 * Freshly initialized encoder without a classification head.
 */
enum PrunelabStatus prunelab_model_new(const struct PrunelabModelConfig *config,
                                       uint64_t seed,
                                       struct PrunelabModel **out);

enum PrunelabStatus prunelab_model_load(const char *path, struct PrunelabModel **out);

enum PrunelabStatus prunelab_model_save(const struct PrunelabModel *model, const char *path);

void prunelab_model_free(struct PrunelabModel *model);

enum PrunelabStatus prunelab_model_config(const struct PrunelabModel *model,
                                          struct PrunelabModelConfig *out);

/**
 * Shape of the parameter tensor called `name`.
 */
enum PrunelabStatus prunelab_model_param_shape(const struct PrunelabModel *model,
                                               const char *name,
                                               size_t *rows,
                                               size_t *cols);

/**
 * Copies the row-major values of parameter `name` into `buf`, which must
 * hold exactly rows * cols floats.
 */
enum PrunelabStatus prunelab_model_param_copy(const struct PrunelabModel *model,
                                              const char *name,
                                              float *buf,
                                              size_t len);

/**
 * One-shot magnitude pruning of every prunable matrix to `sparsity`. The
 * pruned weights are set to zero and the masks are returned in `out`.
 */
enum PrunelabStatus prunelab_model_prune(struct PrunelabModel *model,
                                         double sparsity,
                                         enum PrunelabScope scope,
                                         struct PrunelabMasks **out);

/**
 * Pooled sort-order movement from `before` to `after`, in percent of matrix size.
 */
enum PrunelabStatus prunelab_model_movement(const struct PrunelabModel *before,
                                            const struct PrunelabModel *after,
                                            double *mean,
                                            double *std);

/**
 * Per-layer cosine similarity of mean-pooled features. `tokens` holds the
 * sequences back to back with lengths in `lengths`; `out` receives one value
 * per layer and must have room for `num_layers` values.
 */
enum PrunelabStatus prunelab_model_cosine(const struct PrunelabModel *a,
                                          const struct PrunelabModel *b,
                                          const uint32_t *tokens,
                                          const size_t *lengths,
                                          size_t num_sequences,
                                          double *out,
                                          size_t out_len);

enum PrunelabStatus prunelab_masks_load(const char *path, struct PrunelabMasks **out);

void prunelab_masks_free(struct PrunelabMasks *masks);

/**
 * Number of matrices covered by the mask set.
 */
enum PrunelabStatus prunelab_masks_count(const struct PrunelabMasks *masks, size_t *out);

/**
 * Fraction of pruned positions over all matrices.
 */
enum PrunelabStatus prunelab_masks_sparsity(const struct PrunelabMasks *masks, double *out);

/**
 * Fraction of positions whose pruned/kept status differs between two mask
 * sets of equal sparsity.
 */
enum PrunelabStatus prunelab_masks_diff(const struct PrunelabMasks *a,
                                        const struct PrunelabMasks *b,
                                        double *out);

/**
 * Largest magnitude removed when pruning `values` to `sparsity`.
 */
enum PrunelabStatus prunelab_magnitude_threshold(const float *values,
                                                 size_t len,
                                                 double sparsity,
                                                 float *out);

/**
 * Runs every cell of the experiment in the TOML file at `config_path`,
 * writing results under `out_dir`.
 */
enum PrunelabStatus prunelab_run_experiment(const char *config_path,
                                            const char *out_dir,
                                            size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRUNELAB_H */

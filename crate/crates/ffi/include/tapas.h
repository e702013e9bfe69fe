#ifndef TAPAS_H
#define TAPAS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TapasStatus {
  TAPAS_STATUS_OK = 0,
  TAPAS_STATUS_NULL_POINTER = 1,
  TAPAS_STATUS_INVALID_ARGUMENT = 2,
  TAPAS_STATUS_SHAPE = 3,
  TAPAS_STATUS_FORMAT = 4,
  TAPAS_STATUS_CONFIG = 5,
  TAPAS_STATUS_IO = 6,
  TAPAS_STATUS_PANIC = 7,
} TapasStatus;

typedef struct TapasDataset TapasDataset;

typedef struct TapasDistribution TapasDistribution;

typedef struct TapasModel TapasModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *tapas_last_error_message(void);

/**
 * # Safety
 * `s` must be null or come from this library.
 */
void tapas_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tapas_version(void);

/**
 * Generate the train and test sets described by `preset` (may be null)
 * plus `overrides`, a text of `key = value` lines (may be null).
 *
 * # Safety
 * Pointers must be valid; out-pointers must be writable.
 */
enum TapasStatus tapas_dataset_generate(const char *preset,
                                        const char *overrides,
                                        struct TapasDataset **out_train,
                                        struct TapasDataset **out_test);

/**
 * Build a dataset from a row-major `rows x cols` feature matrix and
 * `rows` labels in `[0, vocab)`.
 *
 * # Safety
 * `features` must hold `rows * cols` values and `labels` `rows` values.
 */
enum TapasStatus tapas_dataset_from_arrays(const double *features,
                                           size_t rows,
                                           size_t cols,
                                           const uint32_t *labels,
                                           size_t vocab,
                                           struct TapasDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum TapasStatus tapas_dataset_load(const char *path, struct TapasDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum TapasStatus tapas_dataset_save(const struct TapasDataset *ds, const char *path);

/**
 * Number of examples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t tapas_dataset_len(const struct TapasDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t tapas_dataset_dim(const struct TapasDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t tapas_dataset_vocab(const struct TapasDataset *ds);

/**
 * Copy the empirical label frequencies into `out` (`len` must equal the
 * vocabulary size).
 *
 * # Safety
 * `out` must hold `len` values.
 */
enum TapasStatus tapas_dataset_label_frequencies(const struct TapasDataset *ds,
                                                 double *out,
                                                 size_t len);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void tapas_dataset_free(struct TapasDataset *ds);

/**
 * `q ∝ (f + beta)^alpha` over the `len` label frequencies.
 *
 * # Safety
 * `freqs` must hold `len` values; `out` writable.
 */
enum TapasStatus tapas_distribution_squashed(const double *freqs,
                                             size_t len,
                                             double alpha,
                                             double beta,
                                             struct TapasDistribution **out);

/**
 * # Safety
 * `out` writable.
 */
enum TapasStatus tapas_distribution_uniform(size_t vocab, struct TapasDistribution **out);

/**
 * Copy the normalized probabilities into `out` (`len` must equal the
 * vocabulary size).
 *
 * # Safety
 * `out` must hold `len` values.
 */
enum TapasStatus tapas_distribution_probs(const struct TapasDistribution *dist,
                                          double *out,
                                          size_t len);

/**
 * # Safety
 * `dist` must be null or a handle not yet freed.
 */
void tapas_distribution_free(struct TapasDistribution *dist);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum TapasStatus tapas_model_load(const char *path, struct TapasModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TapasStatus tapas_model_save(const struct TapasModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tapas_model_vocab(const struct TapasModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tapas_model_input_dim(const struct TapasModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tapas_model_context_dim(const struct TapasModel *model);

/**
 * Encode one input of `dim` features into `out` (`out_len` must equal
 * the context dimension).
 *
 * # Safety
 * `x` must hold `dim` values and `out` `out_len` values.
 */
enum TapasStatus tapas_model_encode(const struct TapasModel *model,
                                    const double *x,
                                    size_t dim,
                                    double *out,
                                    size_t out_len);

/**
 * Write the `k` highest-scoring labels for input `x`, best first.
 *
 * # Safety
 * `x` must hold `dim` values and `out` `k` values.
 */
enum TapasStatus tapas_model_top_k(const struct TapasModel *model,
                                   const double *x,
                                   size_t dim,
                                   size_t k,
                                   uint32_t *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tapas_model_free(struct TapasModel *model);

/**
 * Two-pass sampling: presample `n * r` labels from `dist` without
 * replacement (skipping `exclude`), then keep the `n` with the highest
 * adaptive score under the model's label embeddings at temperature `tau`.
 * `contexts` is a row-major `rows x cols` matrix of encoded contexts.
 * Sorted labels are written to `out` (capacity `out_cap`, at least `n`)
 * and their count to `out_len`.
 *
 * # Safety
 * Buffers must hold the stated number of values; handles must be live.
 */
enum TapasStatus tapas_two_pass_sample(const double *contexts,
                                       size_t rows,
                                       size_t cols,
                                       const struct TapasDistribution *dist,
                                       const struct TapasModel *model,
                                       size_t n,
                                       size_t r,
                                       double tau,
                                       const uint32_t *exclude,
                                       size_t exclude_len,
                                       uint64_t seed,
                                       uint32_t *out,
                                       size_t out_cap,
                                       size_t *out_len);

/**
 * # Safety
 * `ranked` must hold `ranked_len` values and `truth` `truth_len` values.
 */
enum TapasStatus tapas_precision_at_k(const uint32_t *ranked,
                                      size_t ranked_len,
                                      const uint32_t *truth,
                                      size_t truth_len,
                                      size_t k,
                                      double *out);

/**
 * # Safety
 * `ranked` must hold `ranked_len` values and `truth` `truth_len` values.
 */
enum TapasStatus tapas_map_at_k(const uint32_t *ranked,
                                size_t ranked_len,
                                const uint32_t *truth,
                                size_t truth_len,
                                size_t k,
                                double *out);

/**
 * Train on `train`, evaluating on `eval`, with the run configuration given
 * by `preset` (may be null) and `overrides` (may be null). The trained
 * model goes to `out_model` and the metric series, as JSON lines, to
 * `out_metrics` (release with [`tapas_string_free`]).
 *
 * # Safety
 * Handles must be live; out-pointers writable.
 */
enum TapasStatus tapas_train(const char *preset,
                             const char *overrides,
                             const struct TapasDataset *train,
                             const struct TapasDataset *eval,
                             struct TapasModel **out_model,
                             char **out_metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAPAS_H */

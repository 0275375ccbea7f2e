#ifndef TAGGER_H
#define TAGGER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TaggerStatus {
  TAGGER_STATUS_OK = 0,
  TAGGER_STATUS_NULL_POINTER = 1,
  TAGGER_STATUS_INVALID_ARGUMENT = 2,
  TAGGER_STATUS_IO = 3,
  TAGGER_STATUS_FORMAT = 4,
  TAGGER_STATUS_SHAPE = 5,
  TAGGER_STATUS_NUMERIC = 6,
  TAGGER_STATUS_PANIC = 7,
} TaggerStatus;

/**
 * A dataset with inputs, ground-truth groups and labels.
 */
typedef struct TaggerDataset TaggerDataset;

/**
 * A trained or freshly initialized model.
 */
typedef struct TaggerModel TaggerModel;

/**
 * Summary written by [`tagger_evaluate`].
 */
typedef struct TaggerEvalSummary {
  /**
   * Mean per-example AMI, NaN when the data has no segmentation.
   */
  double ami;
  /**
   * Denoising cost at the final iteration.
   */
  double final_cost;
  /**
   * Classification error, NaN without a class head or labels.
   */
  double classification_error;
  uintptr_t iterations;
} TaggerEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tagger_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tagger_version(void);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TaggerStatus tagger_model_load(const char *path, struct TaggerModel **out);

/**
 * Creates an untrained model. `binary` selects bit-flip corruption with
 * level `noise`, otherwise Gaussian noise with standard deviation `noise`.
 * `layers` lists the Ladder widths, bottom first.
 *
 * # Safety
 * `layers` must point to `n_layers` values and `out` be writable.
 */
enum TaggerStatus tagger_model_new(uintptr_t input_size,
                                   uintptr_t groups,
                                   uintptr_t iterations,
                                   const uintptr_t *layers,
                                   uintptr_t n_layers,
                                   bool binary,
                                   double noise,
                                   double data_mean,
                                   uint64_t seed,
                                   struct TaggerModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum TaggerStatus tagger_model_save(const struct TaggerModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tagger_model_free(struct TaggerModel *model);

/**
 * Input size `N` of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uintptr_t tagger_model_input_size(const struct TaggerModel *model);

/**
 * Groups `K` the model was configured with, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uintptr_t tagger_model_groups(const struct TaggerModel *model);

/**
 * Groups a batch of `batch` inputs of the model's input size.
 *
 * Writes the final assignment masks as `[batch, groups, N]` into `masks`
 * and the reconstructions `Σ_k m_k z_k` as `[batch, N]` into
 * `reconstructions`. Either output may be null to skip it; non-null
 * outputs must hold exactly that many values.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum TaggerStatus tagger_model_run(const struct TaggerModel *model,
                                   const double *inputs,
                                   uintptr_t batch,
                                   uintptr_t groups,
                                   uintptr_t iterations,
                                   uint64_t seed,
                                   double *masks,
                                   uintptr_t masks_len,
                                   double *reconstructions,
                                   uintptr_t reconstructions_len);

/**
 * Scores the model on a dataset.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum TaggerStatus tagger_evaluate(const struct TaggerModel *model,
                                  const struct TaggerDataset *dataset,
                                  uintptr_t groups,
                                  uintptr_t iterations,
                                  uint64_t seed,
                                  struct TaggerEvalSummary *out);

/**
 * Loads a dataset container.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum TaggerStatus tagger_dataset_load(const char *path, struct TaggerDataset **out);

/**
 * Generates `count` Shapes examples.
 *
 * # Safety
 * `out` must be writable.
 */
enum TaggerStatus tagger_dataset_generate_shapes(uintptr_t count,
                                                 uint64_t seed,
                                                 struct TaggerDataset **out);

/**
 * Writes a dataset container.
 *
 * # Safety
 * `dataset` must come from this library; `path` must be NUL-terminated.
 */
enum TaggerStatus tagger_dataset_save(const struct TaggerDataset *dataset, const char *path);

/**
 * Number of examples, 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or come from this library.
 */
uintptr_t tagger_dataset_len(const struct TaggerDataset *dataset);

/**
 * Values per example, 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or come from this library.
 */
uintptr_t tagger_dataset_input_size(const struct TaggerDataset *dataset);

/**
 * Copies example `index` into `values`, which must hold exactly the
 * dataset's input size.
 *
 * # Safety
 * `values` must be valid for `len` writes.
 */
enum TaggerStatus tagger_dataset_example(const struct TaggerDataset *dataset,
                                         uintptr_t index,
                                         double *values,
                                         uintptr_t len);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void tagger_dataset_free(struct TaggerDataset *dataset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAGGER_H */

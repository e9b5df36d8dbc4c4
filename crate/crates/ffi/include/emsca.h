/* C interface to the emsca classification pipeline. */

#ifndef EMSCA_H
#define EMSCA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define EMSCA_OK 0

/**
 * Invalid argument (bad value, bad enum, usage error).
 */
#define EMSCA_ERR_ARGUMENT 1

/**
 * Data, format, schema, or I/O problem.
 */
#define EMSCA_ERR_DATA 2

/**
 * Training failed (divergence, empty set).
 */
#define EMSCA_ERR_TRAINING 3

/**
 * A required pointer was null.
 */
#define EMSCA_ERR_NULL 4

/**
 * Retrain only the output layer (the default transfer mode).
 */
#define EMSCA_FREEZE_OUTPUT_ONLY 0

/**
 * Retrain only the input layer.
 */
#define EMSCA_FREEZE_INPUT_ONLY 1

/**
 * Freeze `layers` layers nearest the output; retrain the rest.
 */
#define EMSCA_FREEZE_TOP 2

/**
 * Freeze `layers` layers nearest the input; retrain the rest.
 */
#define EMSCA_FREEZE_BOTTOM 3

/**
 * Opaque labeled feature dataset.
 */
typedef struct EmscaDataset EmscaDataset;

/**
 * Opaque trained classifier.
 */
typedef struct EmscaModel EmscaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *emsca_version(void);

/**
 * Message of the calling thread's most recent failure. Never null; empty
 * when no failure has occurred. Valid until the next failing call on the
 * same thread.
 */
const char *emsca_last_error(void);

/**
 * Loads an EMDS dataset file into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int32_t emsca_dataset_load(const char *path, struct EmscaDataset **out);

/**
 * Writes a dataset handle to an EMDS file.
 *
 * # Safety
 * `ds` must be a live handle from this library; `path` a valid string.
 */
int32_t emsca_dataset_save(const struct EmscaDataset *ds, const char *path);

/**
 * Number of rows, or -1 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
int64_t emsca_dataset_rows(const struct EmscaDataset *ds);

/**
 * Feature width, or -1 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
int64_t emsca_dataset_width(const struct EmscaDataset *ds);

/**
 * Class count, or -1 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
int64_t emsca_dataset_classes(const struct EmscaDataset *ds);

/**
 * Stratified train/test split; produces two new handles.
 *
 * # Safety
 * `ds` must be a live handle; `out_train` and `out_test` valid pointers.
 */
int32_t emsca_dataset_split(const struct EmscaDataset *ds,
                            double test_fraction,
                            uint64_t seed,
                            struct EmscaDataset **out_train,
                            struct EmscaDataset **out_test);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void emsca_dataset_free(struct EmscaDataset *ds);

/**
 * Trains a fresh classifier on `train`, validating on `val`.
 *
 * `hidden` points to `hidden_len` hidden-layer widths; pass
 * `hidden_len = 0` for a single softmax layer. The input width and class
 * count come from the training set.
 *
 * # Safety
 * Handles must be live; `hidden` must point to `hidden_len` values;
 * `out` must be a valid pointer.
 */
int32_t emsca_model_train(const struct EmscaDataset *train,
                          const struct EmscaDataset *val,
                          const uint64_t *hidden,
                          uintptr_t hidden_len,
                          uint32_t epochs,
                          uint32_t batch_size,
                          uint64_t seed,
                          struct EmscaModel **out);

/**
 * Loads an EMNN model file into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int32_t emsca_model_load(const char *path, struct EmscaModel **out);

/**
 * Writes a model handle to an EMNN file (bit-exact round trip).
 *
 * # Safety
 * `model` must be a live handle; `path` a valid string.
 */
int32_t emsca_model_save(const struct EmscaModel *model, const char *path);

/**
 * Total parameter count, or -1 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int64_t emsca_model_total_params(const struct EmscaModel *model);

/**
 * Trainable parameter count under the model's freeze mask, or -1.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int64_t emsca_model_trainable_params(const struct EmscaModel *model);

/**
 * Accuracy of the model on a dataset, written to `out_accuracy`.
 *
 * # Safety
 * Handles must be live and `out_accuracy` a valid pointer.
 */
int32_t emsca_model_evaluate(const struct EmscaModel *model,
                             const struct EmscaDataset *ds,
                             double *out_accuracy);

/**
 * Predicted class index for one raw feature row of `len` values.
 *
 * # Safety
 * `model` must be live; `features` must point to `len` values;
 * `out_label` must be valid.
 */
int32_t emsca_model_predict(const struct EmscaModel *model,
                            const float *features,
                            uintptr_t len,
                            uint32_t *out_label);

/**
 * Adapts a pretrained model to new data by retraining the layers selected
 * by `freeze_mode` (an `EMSCA_FREEZE_*` constant; `layers` applies to the
 * top/bottom modes). Produces a new handle; the input model is untouched.
 *
 * # Safety
 * Handles must be live; `out` must be a valid pointer.
 */
int32_t emsca_transfer_fit(const struct EmscaModel *model,
                           const struct EmscaDataset *train,
                           const struct EmscaDataset *val,
                           int32_t freeze_mode,
                           uint32_t layers,
                           bool reinit_unfrozen,
                           uint32_t epochs,
                           uint32_t batch_size,
                           uint64_t seed,
                           struct EmscaModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void emsca_model_free(struct EmscaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMSCA_H */

#ifndef UTAL_H
#define UTAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of tIoU thresholds reported by [`utal_evaluate`].
 */
#define UTAL_NUM_THRESHOLDS 5

typedef enum UtalConditionMode {
  UTAL_CONDITION_MODE_HE = 0,
  UTAL_CONDITION_MODE_PAPER = 1,
} UtalConditionMode;

typedef enum UtalStatus {
  UTAL_STATUS_OK = 0,
  UTAL_STATUS_NULL_ARGUMENT = 1,
  UTAL_STATUS_INVALID_ARGUMENT = 2,
  UTAL_STATUS_IO = 3,
  UTAL_STATUS_FORMAT = 4,
  UTAL_STATUS_SHAPE_MISMATCH = 5,
  UTAL_STATUS_NON_FINITE = 6,
  UTAL_STATUS_CONFIG = 7,
  UTAL_STATUS_PANIC = 8,
} UtalStatus;

/**
 * Loaded dataset.
 */
typedef struct UtalDataset UtalDataset;

/**
 * Loaded checkpoint.
 */
typedef struct UtalModel UtalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *utal_last_error(void);

double utal_erf(double x);

/**
 * Temporal IoU of `[s1, e1]` and `[s2, e2]`.
 */
double utal_tiou(double s1, double e1, double s2, double e2);

/**
 * `E|d − σε|` for ε ~ N(0, 1). Fails unless `sigma > 0`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
enum UtalStatus utal_expected_l1(double d, double sigma, double *out);

/**
 * KL-ℓ1 loss of a Gaussian prediction `(mu, alpha = log σ²)` at `target`,
 * with gradients w.r.t. `mu` and `alpha`. Gradient pointers may be null.
 *
 * # Safety
 * Non-null pointers must be writable for one `double` each.
 */
enum UtalStatus utal_kl_l1(double mu,
                           double alpha,
                           double target,
                           enum UtalConditionMode mode,
                           double *out_loss,
                           double *out_d_mu,
                           double *out_d_alpha);

/**
 * Loads a checkpoint and its `.json` sidecar.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum UtalStatus utal_model_load(const char *path, struct UtalModel **out);

/**
 * # Safety
 * `model` must come from [`utal_model_load`] and not be used afterwards.
 */
void utal_model_free(struct UtalModel *model);

/**
 * Length of the pooled feature vector the model expects, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t utal_model_input_dim(const struct UtalModel *model);

/**
 * Number of classes, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t utal_model_num_classes(const struct UtalModel *model);

/**
 * Length of the buffer written by [`utal_model_forward`]: `1 + 5·C`.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t utal_model_output_len(const struct UtalModel *model);

/**
 * Forward pass on one pooled feature vector. Writes the actioness
 * probability, then `C` class logits, then per class the start and end
 * offsets (in proposal lengths) followed by their σ. σ is NaN for models
 * trained without uncertainty.
 *
 * # Safety
 * `x` must hold `x_len` doubles and `out` must hold `out_len` doubles.
 */
enum UtalStatus utal_model_forward(const struct UtalModel *model,
                                   const double *x,
                                   size_t x_len,
                                   double *out,
                                   size_t out_len);

/**
 * Loads a dataset from its manifest.
 *
 * # Safety
 * `manifest` must be a nul-terminated string; `out` must be writable.
 */
enum UtalStatus utal_dataset_load(const char *manifest, struct UtalDataset **out);

/**
 * # Safety
 * `dataset` must come from [`utal_dataset_load`] and not be used afterwards.
 */
void utal_dataset_free(struct UtalDataset *dataset);

/**
 * Number of videos, 0 for null.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t utal_dataset_num_videos(const struct UtalDataset *dataset);

/**
 * Detects on the test subset with default settings and writes mAP at
 * tIoU 0.3, 0.4, 0.5, 0.6 and 0.7 as fractions.
 *
 * # Safety
 * Handles must be live; `out_map` must hold `out_len ≥ 5` doubles.
 */
enum UtalStatus utal_evaluate(const struct UtalModel *model,
                              const struct UtalDataset *dataset,
                              double *out_map,
                              size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UTAL_H */

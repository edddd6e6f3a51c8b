#ifndef ADVSYN_H
#define ADVSYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvsynStatus {
  ADVSYN_STATUS_OK = 0,
  ADVSYN_STATUS_NULL_POINTER = 1,
  ADVSYN_STATUS_INVALID_ARGUMENT = 2,
  ADVSYN_STATUS_CONFIG = 3,
  ADVSYN_STATUS_DATA = 4,
  ADVSYN_STATUS_IO = 5,
  ADVSYN_STATUS_FORMAT = 6,
  ADVSYN_STATUS_CHECKSUM = 7,
  ADVSYN_STATUS_DIVERGENCE = 8,
  ADVSYN_STATUS_SHAPE = 9,
  ADVSYN_STATUS_INTERNAL = 10,
} AdvsynStatus;

/**
 * A trained classifier restored from a checkpoint.
 */
typedef struct AdvsynClassifier AdvsynClassifier;

/**
 * Images with labels, each `size x size` in `[-1, 1]`.
 */
typedef struct AdvsynDataset AdvsynDataset;

/**
 * A GAN generator restored from a checkpoint.
 */
typedef struct AdvsynGenerator AdvsynGenerator;

/**
 * Per-class and aggregate metrics. Undefined ratios are 0 and flagged.
 */
typedef struct AdvsynReport {
  double precision_negative;
  double recall_negative;
  double f1_negative;
  uint64_t support_negative;
  double precision_positive;
  double recall_positive;
  double f1_positive;
  uint64_t support_positive;
  double accuracy;
  double macro_f1;
  double weighted_f1;
  uint64_t total;
  /**
   * Non-zero when any reported ratio had a zero denominator.
   */
  uint8_t any_undefined;
} AdvsynReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *advsyn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *advsyn_version(void);

/**
 * Draws `n_pos` tumor then `n_neg` clean phantom images.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum AdvsynStatus advsyn_dataset_phantom(size_t size,
                                         size_t n_pos,
                                         size_t n_neg,
                                         uint64_t seed,
                                         struct AdvsynDataset **out);

/**
 * Loads a dataset directory (`yes/`, `no/`, optional `manifest.csv`),
 * resized to `size x size`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AdvsynStatus advsyn_dataset_load(const char *path, size_t size, struct AdvsynDataset **out);

/**
 * Number of images, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t advsyn_dataset_len(const struct AdvsynDataset *ds);

/**
 * Side length of the (square) images, or 0 for NULL or empty datasets.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t advsyn_dataset_image_size(const struct AdvsynDataset *ds);

/**
 * Copies image `index` (row-major, `size * size` values) and its label.
 *
 * # Safety
 * `ds` must be a live handle; `pixels` must have room for `capacity`
 * doubles; `label` must be writable or NULL.
 */
enum AdvsynStatus advsyn_dataset_image(const struct AdvsynDataset *ds,
                                       size_t index,
                                       double *pixels,
                                       size_t capacity,
                                       uint8_t *label);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void advsyn_dataset_free(struct AdvsynDataset *ds);

/**
 * Restores the generator from a GAN checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AdvsynStatus advsyn_generator_load(const char *path, struct AdvsynGenerator **out);

/**
 * Generates `n` synthetic positives from `seed`.
 *
 * # Safety
 * `generator` must be a live handle; `out` must be writable.
 */
enum AdvsynStatus advsyn_generator_generate(const struct AdvsynGenerator *generator,
                                            size_t n,
                                            uint64_t seed,
                                            struct AdvsynDataset **out);

/**
 * # Safety
 * `generator` must be NULL or a handle not yet freed.
 */
void advsyn_generator_free(struct AdvsynGenerator *generator);

/**
 * Restores a classifier checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AdvsynStatus advsyn_classifier_load(const char *path, struct AdvsynClassifier **out);

/**
 * Tumor probability and 0/1 label (probability >= 0.5) for every image.
 *
 * # Safety
 * Handles must be live; `probabilities` and `labels` must each hold
 * `capacity` elements; either may be NULL to skip it.
 */
enum AdvsynStatus advsyn_classifier_predict(const struct AdvsynClassifier *classifier,
                                            const struct AdvsynDataset *ds,
                                            double *probabilities,
                                            uint8_t *labels,
                                            size_t capacity);

/**
 * # Safety
 * `classifier` must be NULL or a handle not yet freed.
 */
void advsyn_classifier_free(struct AdvsynClassifier *classifier);

/**
 * Metrics for a binary confusion matrix.
 *
 * # Safety
 * `out` must be writable.
 */
enum AdvsynStatus advsyn_classification_report(uint64_t tn,
                                               uint64_t fp,
                                               uint64_t fn_,
                                               uint64_t tp,
                                               struct AdvsynReport *out);

/**
 * Jensen-Shannon divergence (nats) of two histograms of `bins` masses.
 *
 * # Safety
 * `h1` and `h2` must each point to `bins` doubles; `out` must be writable.
 */
enum AdvsynStatus advsyn_histogram_divergence(const double *h1,
                                              const double *h2,
                                              size_t bins,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVSYN_H */

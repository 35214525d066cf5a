#ifndef FEDCLUST_H
#define FEDCLUST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcStatus {
  FC_STATUS_OK = 0,
  /*
   Null pointer, zero size or otherwise unusable argument.
   */
  FC_STATUS_INVALID_ARGUMENT = 1,
  FC_STATUS_CONFIG = 2,
  /*
   Malformed or truncated file.
   */
  FC_STATUS_FORMAT = 3,
  FC_STATUS_IO = 4,
  FC_STATUS_DIVERGENCE = 5,
  /*
   Singular covariance, degenerate rows and similar numerical failures.
   */
  FC_STATUS_NUMERICAL = 6,
  /*
   The requested value does not exist, e.g. ACC for an unlabelled run.
   */
  FC_STATUS_UNAVAILABLE = 7,
  FC_STATUS_PANIC = 8,
} FcStatus;

/*
 A loaded embedding dataset.
 */
typedef struct FcDataset FcDataset;

/*
 The outcome of a finished experiment run.
 */
typedef struct FcRun FcRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null. The pointer
 stays valid until the next `fc_*` call on the same thread.
 */
const char *fc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fc_version(void);

/*
 Loads a dataset file (`.fstc` binary or `.csv`).

 # Safety
 `path` must be a NUL-terminated string and `out_ds` a valid pointer.
 */
enum FcStatus fc_dataset_load(const char *path, struct FcDataset **out_ds);

/*
 Builds a dataset from an `n × d` matrix. `labels_in` may be null.

 # Safety
 `x` must hold `n * d` values, `labels_in` (if non-null) `n` values.
 */
enum FcStatus fc_dataset_new(const double *x,
                             size_t n,
                             size_t d,
                             const uint32_t *labels_in,
                             struct FcDataset **out_ds);

/*
 Number of rows, or 0 for a null handle.

 # Safety
 `ds` must be null or a live handle.
 */
size_t fc_dataset_rows(const struct FcDataset *ds);

/*
 Embedding dimension, or 0 for a null handle.

 # Safety
 `ds` must be null or a live handle.
 */
size_t fc_dataset_dim(const struct FcDataset *ds);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void fc_dataset_free(struct FcDataset *ds);

/*
 Balanced soft pseudo-labels for an `n × k` score matrix. `q_out`
 receives the square-normalized labels and `xi_out` (optional) the
 transport plan. `converged` (optional) is set to 1 or 0.

 # Safety
 `scores`, `q_out` and a non-null `xi_out` must hold `n * k` values.
 */
enum FcStatus fc_pseudo_labels(const double *scores,
                               size_t n,
                               size_t k,
                               double epsilon,
                               size_t max_iters,
                               double tol,
                               double *q_out,
                               double *xi_out,
                               int32_t *converged);

/*
 Fits the two-component residual mixture for `tau` EM sweeps and writes
 the sample weights (0 for discarded samples) to `w_out`.

 # Safety
 `q` and `o` must hold `n * k` values, `w_out` `n` values.
 */
enum FcStatus fc_sample_weights(const double *q,
                                const double *o,
                                size_t n,
                                size_t k,
                                size_t tau,
                                double *w_out);

/*
 Clustering accuracy under the best one-to-one relabeling.

 # Safety
 `y` and `y_hat` must hold `n` values.
 */
enum FcStatus fc_accuracy(const uint32_t *y,
                          const uint32_t *y_hat,
                          size_t n,
                          size_t k,
                          double *acc);

/*
 Normalized mutual information (geometric-mean normalization).

 # Safety
 `y` and `y_hat` must hold `n` values.
 */
enum FcStatus fc_nmi(const uint32_t *y, const uint32_t *y_hat, size_t n, double *value);

/*
 k-means with `restarts` seeded restarts, keeping the lowest inertia.
 Writes one cluster id per row to `assignments`.

 # Safety
 `ds` must be a live handle, `assignments` must hold one value per row.
 */
enum FcStatus fc_kmeans(const struct FcDataset *ds,
                        size_t k,
                        uint64_t seed,
                        size_t restarts,
                        uint32_t *assignments,
                        double *inertia);

/*
 Runs a full experiment described by a TOML document, writing the usual
 run directory under its `output_dir`.

 # Safety
 `config_toml` must be a NUL-terminated string and `out_run` valid.
 */
enum FcStatus fc_run(const char *config_toml, struct FcRun **out_run);

/*
 Final accuracy of the averaged model. `Unavailable` if the dataset had
 no labels.

 # Safety
 `run` must be a live handle.
 */
enum FcStatus fc_run_accuracy(const struct FcRun *run, double *acc);

/*
 # Safety
 `run` must be a live handle.
 */
enum FcStatus fc_run_nmi(const struct FcRun *run, double *value);

/*
 Path of the run directory, owned by the handle. Null for a null handle.

 # Safety
 `run` must be null or a live handle.
 */
const char *fc_run_dir(const struct FcRun *run);

/*
 # Safety
 `run` must be null or a handle not yet freed.
 */
void fc_run_free(struct FcRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDCLUST_H */

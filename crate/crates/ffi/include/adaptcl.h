#ifndef ADAPTCL_H
#define ADAPTCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define ADAPTCL_MODE_TASK_LABEL 0

#define ADAPTCL_MODE_CONF_INFER 1

#define ADAPTCL_MODE_AVG_APT 2

typedef enum AdaptclStatus {
  ADAPTCL_STATUS_OK = 0,
  ADAPTCL_STATUS_NULL_ARGUMENT = 1,
  ADAPTCL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A metric is undefined for the given inputs, e.g. COV with no gap.
   */
  ADAPTCL_STATUS_UNDEFINED = 3,
  ADAPTCL_STATUS_INTEGRITY = 4,
  ADAPTCL_STATUS_IO = 5,
  ADAPTCL_STATUS_PROTOCOL = 6,
  ADAPTCL_STATUS_PANIC = 7,
} AdaptclStatus;

/**
 * A model and its parameters restored from a checkpoint file.
 */
typedef struct AdaptclCheckpoint AdaptclCheckpoint;

/**
 * An opened dataset manifest.
 */
typedef struct AdaptclManifest AdaptclManifest;

/**
 * A WER matrix; row `i` holds the WERs on tasks `1..=i` after training task `i`.
 */
typedef struct AdaptclMatrix AdaptclMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *adaptcl_last_error(void);

/**
 * Token error rate in percent of `hyp` against a non-empty `reference`.
 *
 * # Safety
 * The arrays must hold at least the given number of elements.
 */
enum AdaptclStatus adaptcl_wer(const uint32_t *reference,
                               uintptr_t reference_len,
                               const uint32_t *hyp,
                               uintptr_t hyp_len,
                               double *out);

/**
 * Share of the fine-tuning to separate-model gap closed, in percent.
 *
 * # Safety
 * `out` must be writable.
 */
enum AdaptclStatus adaptcl_cov(double avg_method, double avg_ft, double avg_sep, double *out);

struct AdaptclMatrix *adaptcl_matrix_new(void);

/**
 * Appends the next row; its length must be one more than the previous row's.
 *
 * # Safety
 * `matrix` must come from [`adaptcl_matrix_new`]; `row` must hold `len` values.
 */
enum AdaptclStatus adaptcl_matrix_push_row(struct AdaptclMatrix *matrix,
                                           const double *row,
                                           uintptr_t len);

/**
 * # Safety
 * `matrix` must be a live handle and `out` writable.
 */
enum AdaptclStatus adaptcl_matrix_avg(const struct AdaptclMatrix *matrix, double *out);

/**
 * # Safety
 * `matrix` must be a live handle and `out` writable.
 */
enum AdaptclStatus adaptcl_matrix_bwt(const struct AdaptclMatrix *matrix, double *out);

/**
 * Forward transfer against the diagonal of a fine-tuning matrix.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum AdaptclStatus adaptcl_matrix_fwt(const struct AdaptclMatrix *matrix,
                                      const struct AdaptclMatrix *fine_tuning,
                                      double *out);

/**
 * # Safety
 * `matrix` must be null or a handle not yet freed.
 */
void adaptcl_matrix_free(struct AdaptclMatrix *matrix);

/**
 * Loads and verifies a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum AdaptclStatus adaptcl_checkpoint_load(const char *path_, struct AdaptclCheckpoint **out);

/**
 * Number of adapter banks in the checkpoint; 0 for methods without adapters.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
uintptr_t adaptcl_checkpoint_num_banks(const struct AdaptclCheckpoint *ckpt);

/**
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void adaptcl_checkpoint_free(struct AdaptclCheckpoint *ckpt);

/**
 * Opens a dataset manifest and checks its records against the blob.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum AdaptclStatus adaptcl_manifest_load(const char *path_, struct AdaptclManifest **out);

/**
 * # Safety
 * `manifest` must be null or a live handle.
 */
uintptr_t adaptcl_manifest_len(const struct AdaptclManifest *manifest);

/**
 * # Safety
 * `manifest` must be null or a handle not yet freed.
 */
void adaptcl_manifest_free(struct AdaptclManifest *manifest);

/**
 * Decodes every utterance of `manifest` and writes the corpus WER.
 * `mode` is one of the `ADAPTCL_MODE_*` constants; `beam` must be positive.
 *
 * # Safety
 * Both handles must be live and `out_wer` writable.
 */
enum AdaptclStatus adaptcl_evaluate(const struct AdaptclCheckpoint *ckpt,
                                    const struct AdaptclManifest *manifest,
                                    uint32_t mode,
                                    uintptr_t beam,
                                    double *out_wer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAPTCL_H */

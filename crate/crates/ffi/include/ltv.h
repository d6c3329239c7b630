#ifndef LTV_H
#define LTV_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum LtvStatus {
  LTV_STATUS_OK = 0,
  LTV_STATUS_NULL_POINTER = 1,
  LTV_STATUS_INVALID_ARGUMENT = 2,
  LTV_STATUS_IO = 3,
  LTV_STATUS_NUMERIC = 4,
  LTV_STATUS_PARSE = 5,
  LTV_STATUS_MISSING_ARTIFACT = 6,
  LTV_STATUS_BUFFER_TOO_SMALL = 7,
  LTV_STATUS_PANIC = 8,
} LtvStatus;

/**
 * Loaded checkpoint together with the catalogs needed to encode samples.
 */
typedef struct LtvModel LtvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t ltv_last_error_message(char *buf, size_t cap);

/**
 * ZILN mass at `y = 0`, density for `y > 0`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LtvStatus ltv_ziln_pdf(double p_raw, double mu, double sigma_raw, double y, double *out);

/**
 * ZILN negative log-likelihood of `y`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LtvStatus ltv_ziln_nll(double p_raw, double mu, double sigma_raw, double y, double *out);

/**
 * Expected value and purchase probability of a ZILN head.
 *
 * # Safety
 * Both output pointers must be valid.
 */
enum LtvStatus ltv_ziln_predict(double p_raw,
                                double mu,
                                double sigma_raw,
                                double *expected_value,
                                double *purchase_prob);

/**
 * Preference vector from spherical coordinates `(u, v)` into `out[3]`.
 *
 * # Safety
 * `out` must point to 3 writable doubles.
 */
enum LtvStatus ltv_weight_from_uv(double u, double v, double *out);

/**
 * Anchored QP over `m` tasks. `k` is the row-major `m×m` Gram matrix,
 * `task_set` lists the constrained task indices. Writes `beta_out[m]`.
 *
 * # Safety
 * Array arguments must hold the stated number of elements; scalar
 * outputs must be valid pointers.
 */
enum LtvStatus ltv_solve_qp(const double *k,
                            const double *anchor,
                            size_t m,
                            const size_t *task_set,
                            size_t n_task,
                            double *beta_out,
                            double *objective,
                            double *kkt_residual,
                            bool *relaxed);

/**
 * `Σ|pred - true| / Σ true`.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum LtvStatus ltv_nmae(const double *y_true, const double *y_pred, size_t n, double *out);

/**
 * ROC AUC of `scores` against binary `labels` (nonzero = positive).
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum LtvStatus ltv_auc(const uint8_t *labels, const double *scores, size_t n, double *out);

/**
 * Normalized Gini of `y_pred` against `y_true`.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum LtvStatus ltv_n_gini(const double *y_true, const double *y_pred, size_t n, double *out);

/**
 * `|Σ day1 - Σ day2| / Σ day1`.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum LtvStatus ltv_stability_diff(const double *day1, const double *day2, size_t n, double *out);

/**
 * Loads a checkpoint and the user/game catalogs from `data_dir`.
 * Release the handle with [`ltv_model_free`].
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be a valid pointer.
 */
enum LtvStatus ltv_model_load(const char *checkpoint_path,
                              const char *data_dir,
                              struct LtvModel **out);

/**
 * Predicts samples given as JSON Lines in the samples file format.
 * Writes `3·n` expected values (3-, 7-, 30-day per sample) into `out`,
 * which holds `cap` doubles, and the sample count into `n_samples`.
 * Returns `BufferTooSmall` with `n_samples` set when `cap < 3·n`.
 *
 * # Safety
 * `model` must come from [`ltv_model_load`]; `samples_jsonl` must be
 * NUL-terminated; `out` must hold `cap` doubles.
 */
enum LtvStatus ltv_model_predict(const struct LtvModel *model,
                                 const char *samples_jsonl,
                                 double *out,
                                 size_t cap,
                                 size_t *n_samples);

/**
 * Releases a handle from [`ltv_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ltv_model_free(struct LtvModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LTV_H */

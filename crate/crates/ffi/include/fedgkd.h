#ifndef FEDGKD_H
#define FEDGKD_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FgkdStatus {
  FGKD_STATUS_OK = 0,
  FGKD_STATUS_NULL_POINTER = 1,
  FGKD_STATUS_INVALID_UTF8 = 2,
  FGKD_STATUS_INVALID_ARGUMENT = 3,
  FGKD_STATUS_SHAPE = 4,
  FGKD_STATUS_NON_FINITE = 5,
  FGKD_STATUS_CONFIG = 6,
  FGKD_STATUS_PARSE = 7,
  FGKD_STATUS_DATASET = 8,
  FGKD_STATUS_CHECKPOINT = 9,
  FGKD_STATUS_CLIENT_ABORT = 10,
  FGKD_STATUS_IO = 11,
  FGKD_STATUS_BUFFER_TOO_SMALL = 12,
  FGKD_STATUS_PANIC = 13,
} FgkdStatus;

typedef enum FgkdActivation {
  FGKD_ACTIVATION_RELU = 0,
  FGKD_ACTIVATION_TANH = 1,
} FgkdActivation;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct FgkdModel FgkdModel;

/**
 * A federated run in progress.
 */
typedef struct FgkdSimulation FgkdSimulation;

/**
 * Scalar outcome of one communication round.
 */
typedef struct FgkdRoundSummary {
  size_t round;
  double test_accuracy;
  double test_loss;
  double mean_client_train_loss;
  size_t payload_multiplier;
  size_t num_sampled;
  size_t clamp_events;
} FgkdRoundSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fgkd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fgkd_version(void);

/**
 * Releases a string returned by this library. NULL is accepted.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void fgkd_string_free(char *s);

/**
 * Builds a simulation from TOML config text. Relative dataset paths resolve
 * against `base_dir`, or the working directory when it is NULL.
 *
 * # Safety
 * `config_toml` and `base_dir` must be NUL-terminated strings or NULL; `out`
 * must be writable.
 */
enum FgkdStatus fgkd_simulation_new(const char *config_toml,
                                    const char *base_dir,
                                    struct FgkdSimulation **out);

/**
 * # Safety
 * `sim` must come from [`fgkd_simulation_new`] or be NULL.
 */
void fgkd_simulation_free(struct FgkdSimulation *sim);

/**
 * Runs one round. A failed round leaves the simulation unchanged.
 *
 * # Safety
 * `sim` must be a live handle; `out` may be NULL.
 */
enum FgkdStatus fgkd_simulation_run_round(struct FgkdSimulation *sim, struct FgkdRoundSummary *out);

/**
 * Full JSON record of the last completed round, or NULL before the first.
 * Free the result with [`fgkd_string_free`].
 *
 * # Safety
 * `sim` must be a live handle.
 */
char *fgkd_simulation_last_record_json(const struct FgkdSimulation *sim);

/**
 * Completed rounds so far.
 *
 * # Safety
 * `sim` must be a live handle or NULL (which yields 0).
 */
size_t fgkd_simulation_round(const struct FgkdSimulation *sim);

/**
 * Length of the flat parameter vector, or 0 for NULL.
 *
 * # Safety
 * `sim` must be a live handle or NULL.
 */
size_t fgkd_simulation_param_count(const struct FgkdSimulation *sim);

/**
 * Copies the global parameters into `out`, which must hold
 * [`fgkd_simulation_param_count`] values.
 *
 * # Safety
 * `out` must be writable for `out_len` doubles.
 */
enum FgkdStatus fgkd_simulation_copy_params(const struct FgkdSimulation *sim,
                                            double *out,
                                            size_t out_len);

/**
 * Writes the current global model as a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum FgkdStatus fgkd_simulation_save_checkpoint(const struct FgkdSimulation *sim, const char *path);

/**
 * Loads a checkpoint. The file stores layer widths only, so the hidden
 * activation is supplied here.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FgkdStatus fgkd_model_load(const char *path,
                                enum FgkdActivation activation,
                                struct FgkdModel **out);

/**
 * # Safety
 * `model` must come from [`fgkd_model_load`] or be NULL.
 */
void fgkd_model_free(struct FgkdModel *model);

/**
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t fgkd_model_input_width(const struct FgkdModel *model);

/**
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t fgkd_model_num_classes(const struct FgkdModel *model);

/**
 * Class probabilities for `rows` row-major inputs. `out` receives
 * `rows * num_classes` values.
 *
 * # Safety
 * `x` must hold `rows * input_width` doubles; `out` must be writable for
 * `out_len`.
 */
enum FgkdStatus fgkd_model_predict_proba(const struct FgkdModel *model,
                                         const double *x,
                                         size_t rows,
                                         double *out,
                                         size_t out_len);

/**
 * KL(p || q) over two distributions of length `len`.
 *
 * # Safety
 * `p` and `q` must hold `len` doubles; `out` must be writable.
 */
enum FgkdStatus fgkd_kl_div(const double *p, const double *q, size_t len, double *out);

/**
 * Numerically stable softmax of `len` logits into `out`.
 *
 * # Safety
 * `logits` and `out` must hold `len` doubles.
 */
enum FgkdStatus fgkd_softmax(const double *logits, size_t len, double *out);

/**
 * Per-teacher distillation weights from validation losses; they sum to
 * `2 * lambda`.
 *
 * # Safety
 * `losses` and `out` must hold `len` doubles.
 */
enum FgkdStatus fgkd_vote_coefficients(const double *losses,
                                       size_t len,
                                       double lambda,
                                       double beta,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDGKD_H */

#ifndef KEYCVAE_H
#define KEYCVAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum KcStatus {
  KC_STATUS_OK = 0,
  KC_STATUS_NULL_POINTER = 1,
  KC_STATUS_INVALID_ARGUMENT = 2,
  KC_STATUS_IO = 3,
  KC_STATUS_PARSE = 4,
  KC_STATUS_CHECKPOINT = 5,
  KC_STATUS_NUMERIC = 6,
  KC_STATUS_CALIBRATION = 7,
  KC_STATUS_BUFFER_TOO_SMALL = 8,
  KC_STATUS_PANIC = 9,
} KcStatus;

/*
 A trained model with its vocabulary.
 */
typedef struct KcModel KcModel;

/*
 PI controller with its running state.
 */
typedef struct KcPiController KcPiController;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length in bytes without the
 terminator.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t kc_last_error_message(char *buf, size_t len);

/*
 Creates a controller. `anti_windup` is 0 or 1.

 # Safety
 `out` must be valid for writing a pointer.
 */
enum KcStatus kc_pi_new(double setpoint,
                        double kp,
                        double ki,
                        int32_t anti_windup,
                        struct KcPiController **out);

/*
 Feeds one KL observation and writes the clamped weight to `weight`.

 # Safety
 `h` must come from [`kc_pi_new`]; `weight` must be writable.
 */
enum KcStatus kc_pi_update(struct KcPiController *h, double kl, double *weight);

/*
 Current integral accumulator.

 # Safety
 `h` must come from [`kc_pi_new`].
 */
double kc_pi_integral(const struct KcPiController *h);

/*
 # Safety
 `h` must come from [`kc_pi_new`].
 */
enum KcStatus kc_pi_reset(struct KcPiController *h);

/*
 # Safety
 `h` must come from [`kc_pi_new`] or be null; it is invalid afterwards.
 */
void kc_pi_free(struct KcPiController *h);

/*
 Sigmoid annealing weight at `step`.
 */
double kc_cost_anneal_weight(uint64_t step, double midpoint, double slope);

/*
 Cyclical annealing weight at `step`.
 */
double kc_cyclical_anneal_weight(uint64_t step, uint64_t total, uint64_t cycles, double ratio);

/*
 Loads a model or trainer checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KcStatus kc_model_load(const char *path, struct KcModel **out);

/*
 Vocabulary size of a loaded model, 0 for null.

 # Safety
 `h` must come from [`kc_model_load`] or be null.
 */
size_t kc_model_vocab_size(const struct KcModel *h);

/*
 Generates text for a `keyword:order ...` spec. `temperature <= 0`
 decodes greedily. The NUL-terminated result is written to `buf`;
 `needed` receives its length without the terminator. Returns
 `BufferTooSmall` (with `needed` set) when `len` is insufficient.

 # Safety
 `h` must come from [`kc_model_load`]; `spec` must be NUL-terminated;
 `buf` must be valid for `len` bytes; `needed` must be writable.
 */
enum KcStatus kc_model_generate(const struct KcModel *h,
                                const char *spec,
                                uint64_t seed,
                                double temperature,
                                size_t max_len,
                                char *buf,
                                size_t len,
                                size_t *needed);

/*
 # Safety
 `h` must come from [`kc_model_load`] or be null; it is invalid afterwards.
 */
void kc_model_free(struct KcModel *h);

/*
 LCS F1 of two whitespace-tokenized strings.

 # Safety
 Strings must be NUL-terminated; `out` must be writable.
 */
enum KcStatus kc_rouge_l(const char *candidate, const char *reference, double *out);

/*
 Cumulative BLEU up to `max_n` with the default smoothing floor.

 # Safety
 `refs` must point to `n_refs` NUL-terminated strings; `out` writable.
 */
enum KcStatus kc_bleu(const char *candidate,
                      const char *const *refs,
                      size_t n_refs,
                      size_t max_n,
                      double *out);

/*
 Mean BLEU of each text against the others.

 # Safety
 `texts_ptr` must point to `n` NUL-terminated strings; `out` writable.
 */
enum KcStatus kc_self_bleu(const char *const *texts_ptr, size_t n, size_t max_n, double *out);

/*
 Distinct `order`-grams across `n` texts.

 # Safety
 `texts_ptr` must point to `n` NUL-terminated strings; `out` writable.
 */
enum KcStatus kc_dis_n(const char *const *texts_ptr, size_t n, size_t order, size_t *out);

/*
 `KL(q || p)` between diagonal Gaussians given means and log standard
 deviations, each `dim` long.

 # Safety
 All arrays must hold `dim` values; `out` must be writable.
 */
enum KcStatus kc_gaussian_kl(const double *mu_q,
                             const double *log_sigma_q,
                             const double *mu_p,
                             const double *log_sigma_p,
                             size_t dim,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KEYCVAE_H */

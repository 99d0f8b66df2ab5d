#ifndef COMDAD_H
#define COMDAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ComdadStatus {
  COMDAD_STATUS_OK = 0,
  COMDAD_STATUS_NULL_POINTER = 1,
  COMDAD_STATUS_INVALID_ARGUMENT = 2,
  COMDAD_STATUS_IO = 3,
  COMDAD_STATUS_RUNTIME = 4,
  COMDAD_STATUS_BUFFER_TOO_SMALL = 5,
  COMDAD_STATUS_PANIC = 6,
} ComdadStatus;

typedef enum ComdadModality {
  COMDAD_MODALITY_TEXT = 0,
  COMDAD_MODALITY_IMAGE = 1,
} ComdadModality;

typedef enum ComdadPolicy {
  COMDAD_POLICY_CONFIDENCE = 0,
  COMDAD_POLICY_RANDOM = 1,
  COMDAD_POLICY_LEFT_TO_RIGHT = 2,
} ComdadPolicy;

typedef enum ComdadMaskKind {
  COMDAD_MASK_KIND_LINEAR = 0,
  COMDAD_MASK_KIND_COSINE = 1,
} ComdadMaskKind;

// A trained Stage II model with its schedule and sequence lengths.
typedef struct ComdadModel ComdadModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads the Stage II model of a run directory (the one holding
// `config.toml`).
//
// # Safety
// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
enum ComdadStatus comdad_model_load(const char *run_dir, struct ComdadModel **out);

// # Safety
// `model` must come from [`comdad_model_load`] and not be used afterwards.
// Null is ignored.
void comdad_model_free(struct ComdadModel *model);

// Sequence length the model generates for `modality`.
//
// # Safety
// `model` and `out` must be valid pointers.
enum ComdadStatus comdad_model_seq_len(const struct ComdadModel *model,
                                       enum ComdadModality modality,
                                       size_t *out);

// Samples one sequence into `out_tokens` (capacity `out_cap`), writing the
// length to `out_len` and the denoiser evaluation count to `out_evals`
// (may be null). `cond` holds `cond_len` values of a conditioning vector
// (normalized here); pass null and 0 to sample without conditioning.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum ComdadStatus comdad_model_sample(const struct ComdadModel *model,
                                      enum ComdadModality modality,
                                      size_t steps,
                                      enum ComdadPolicy policy,
                                      double temperature,
                                      uint64_t seed,
                                      const double *cond,
                                      size_t cond_len,
                                      uint32_t *out_tokens,
                                      size_t out_cap,
                                      size_t *out_len,
                                      size_t *out_evals);

// Masking marginal `gamma(t)`.
//
// # Safety
// `out` must be a valid pointer.
enum ComdadStatus comdad_gamma_at(enum ComdadMaskKind kind, double t, double *out);

// Latent signal fraction `alpha_bar(t)` for a linear beta schedule.
//
// # Safety
// `out` must be a valid pointer.
enum ComdadStatus comdad_alpha_bar_at(double beta_min, double beta_max, double t, double *out);

// Tokens committed at each of `steps` reverse steps for a length-`length`
// sequence. `out` must hold `steps` entries.
//
// # Safety
// `out` must be valid for `out_cap` writes.
enum ComdadStatus comdad_unmask_budget(enum ComdadMaskKind kind,
                                       size_t length,
                                       size_t steps,
                                       size_t *out,
                                       size_t out_cap);

// Corpus BLEU-`n` (0 to 100) of one candidate against one reference.
//
// # Safety
// Token pointers must be valid for their lengths; `out` must be valid.
enum ComdadStatus comdad_bleu(const uint32_t *candidate,
                              size_t candidate_len,
                              const uint32_t *reference,
                              size_t reference_len,
                              size_t n,
                              double *out);

// Copies the calling thread's last error message (NUL-terminated,
// truncated to fit) into `buf` and returns its full length in bytes
// without the terminator. Empty after a successful call.
//
// # Safety
// `buf` must be null or valid for `cap` writes.
size_t comdad_last_error_message(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMDAD_H */

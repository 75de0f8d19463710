#ifndef COMVE_H
#define COMVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define COMVE_NORMALIZATION_RAW 0

#define COMVE_NORMALIZATION_LENGTH_ROOT 1

#define COMVE_NORMALIZATION_PERPLEXITY 2

typedef enum ComveStatus {
  COMVE_STATUS_OK = 0,
  COMVE_STATUS_NULL_POINTER = 1,
  COMVE_STATUS_INVALID_UTF8 = 2,
  COMVE_STATUS_INVALID_ARGUMENT = 3,
  COMVE_STATUS_IO = 4,
  COMVE_STATUS_FAILED = 5,
  COMVE_STATUS_PANIC = 6,
} ComveStatus;

// Bigram generator trained on a corpus.
typedef struct ComveGenerator ComveGenerator;

// Unigram masked LM trained on a corpus.
typedef struct ComveMaskedLm ComveMaskedLm;

typedef struct ComveDecodeOptions {
  size_t max_new_tokens;
  // Sample instead of taking the most probable token.
  bool sample;
  double temperature;
  // 0 keeps the whole vocabulary.
  size_t top_k;
  uint64_t seed;
} ComveDecodeOptions;

typedef struct ComveBleuReport {
  double score;
  double precisions[4];
  double brevity_penalty;
  size_t candidate_length;
  size_t reference_length;
} ComveBleuReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *comve_last_error(void);

// Library version as a static string.
const char *comve_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void comve_string_free(char *s);

// Trains a unigram masked LM on `corpus`, one text per line.
//
// # Safety
// `corpus` must be a nul-terminated string; `out` must be writable.
enum ComveStatus comve_masked_lm_new(const char *corpus, double alpha, struct ComveMaskedLm **out);

// # Safety
// `lm` must come from [`comve_masked_lm_new`] and not have been freed.
void comve_masked_lm_free(struct ComveMaskedLm *lm);

// Pseudo-log-likelihood of a statement, normalized by `normalization`
// (one of the `COMVE_NORMALIZATION_*` values). The statement is
// period-normalized, tokenized and wrapped in markers first.
//
// # Safety
// Pointers must be valid; `out_value` must be writable.
enum ComveStatus comve_pll_score(const struct ComveMaskedLm *lm,
                                 const char *statement,
                                 uint32_t normalization,
                                 bool content_only,
                                 double *out_value);

// Index (0 or 1) of the more plausible statement; ties go to 0 and set
// `out_tie`.
//
// # Safety
// Pointers must be valid; `out_index` and `out_tie` must be writable.
enum ComveStatus comve_choose_plausible(const struct ComveMaskedLm *lm,
                                        const char *sent0,
                                        const char *sent1,
                                        uint32_t normalization,
                                        bool content_only,
                                        size_t *out_index,
                                        bool *out_tie);

// Trains a bigram generator on `corpus`, one text per line.
//
// # Safety
// `corpus` must be a nul-terminated string; `out` must be writable.
enum ComveStatus comve_generator_new(const char *corpus, double alpha, struct ComveGenerator **out);

// # Safety
// `g` must come from [`comve_generator_new`] and not have been freed.
void comve_generator_free(struct ComveGenerator *g);

// Defaults: 30 tokens, greedy, temperature 1, full vocabulary, seed 0.
struct ComveDecodeOptions comve_decode_options_default(void);

// Generates a reason for `statement`. `options` may be null for the
// defaults. The result goes to `*out` and must be freed with
// [`comve_string_free`].
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum ComveStatus comve_generate_reason(const struct ComveGenerator *g,
                                       const char *statement,
                                       const struct ComveDecodeOptions *options,
                                       char **out);

// Corpus BLEU over `n` examples. Example `i` has `reference_counts[i]`
// references, stored consecutively in `references`.
//
// # Safety
// `candidates` and `reference_counts` must hold `n` entries and
// `references` their sum; `out` must be writable.
enum ComveStatus comve_corpus_bleu(const char *const *candidates,
                                   const char *const *references,
                                   const size_t *reference_counts,
                                   size_t n,
                                   struct ComveBleuReport *out);

// Learning rate at `step` for linear warmup to `peak` over `warmup_steps`
// and linear decay to 0 at `max_steps`.
//
// # Safety
// `out` must be writable.
enum ComveStatus comve_lr_at_step(size_t step,
                                  double peak,
                                  size_t warmup_steps,
                                  size_t max_steps,
                                  double *out);

// Appends a period unless the text already ends in `.`, `!` or `?`.
//
// # Safety
// `input` must be a nul-terminated string; `out` must be writable.
enum ComveStatus comve_ensure_terminal_period(const char *input, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMVE_H */

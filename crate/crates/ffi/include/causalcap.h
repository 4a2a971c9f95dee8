#ifndef CAUSALCAP_H
#define CAUSALCAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_INPUT = 2,
  CC_STATUS_CAPACITY = 3,
  CC_STATUS_CONFIG = 4,
  CC_STATUS_IO = 5,
  CC_STATUS_FORMAT = 6,
  CC_STATUS_DIVERGENCE = 7,
  // The output buffer is too small; the required length is still written.
  CC_STATUS_BUFFER_TOO_SMALL = 8,
  CC_STATUS_PANIC = 9,
} CcStatus;

// Decoding strategy selector for [`cc_decode`].
typedef enum CcStrategyKind {
  CC_STRATEGY_KIND_GREEDY = 0,
  CC_STRATEGY_KIND_BEAM = 1,
  CC_STRATEGY_KIND_TOP_K = 2,
  CC_STRATEGY_KIND_NUCLEUS = 3,
  CC_STRATEGY_KIND_ANCESTRAL = 4,
} CcStrategyKind;

// Opaque handle to a loaded checkpoint.
typedef struct CcModel CcModel;

// `width` is read for beam search, `k` for top-K and `p` for nucleus
// sampling. Other fields are ignored.
typedef struct CcStrategy {
  enum CcStrategyKind kind;
  size_t width;
  size_t k;
  double p;
} CcStrategy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the same
// thread.
const char *cc_last_error_message(void);

// Loads a checkpoint JSON file into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

// Releases a handle from [`cc_model_load`]. Null is a no-op.
//
// # Safety
// `model` must come from [`cc_model_load`] and not be freed twice.
void cc_model_free(struct CcModel *model);

// Vocabulary size of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cc_model_vocab_size(const struct CcModel *model);

// Longest caption the model scores or decodes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cc_model_max_len(const struct CcModel *model);

// Writes the next-token log-probabilities after `prefix` into `out`, which
// must hold at least the vocabulary size.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_next_token_log_probs(const struct CcModel *model,
                                      const uint32_t *cells,
                                      size_t height,
                                      size_t width,
                                      const uint32_t *prefix,
                                      size_t prefix_len,
                                      double *out,
                                      size_t out_len);

// Teacher-forced log-probability of the whole token sequence.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_sequence_log_prob(const struct CcModel *model,
                                   const uint32_t *cells,
                                   size_t height,
                                   size_t width,
                                   const uint32_t *tokens,
                                   size_t tokens_len,
                                   double *out);

// Decodes a caption into `out_tokens`. The caption length is always written
// to `out_len`, also when the buffer is too small.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_decode(const struct CcModel *model,
                        const uint32_t *cells,
                        size_t height,
                        size_t width,
                        struct CcStrategy strategy,
                        uint64_t seed,
                        uint32_t *out_tokens,
                        size_t capacity,
                        size_t *out_len);

// Sentence BLEU-4 of a hypothesis against one reference.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_bleu4(const uint32_t *hypothesis,
                       size_t hypothesis_len,
                       const uint32_t *reference,
                       size_t reference_len,
                       double *out);

// ROUGE-L F-measure of a hypothesis against one reference.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_rouge_l(const uint32_t *hypothesis,
                         size_t hypothesis_len,
                         const uint32_t *reference,
                         size_t reference_len,
                         double *out);

// Writes 1 to `out` when `phrase` occurs contiguously in `caption`, else 0.
// This is the per-caption hallucination test behind CHAIR_s.
//
// # Safety
// Pointers must be valid for the given lengths.
enum CcStatus cc_contains_phrase(const uint32_t *caption,
                                 size_t caption_len,
                                 const uint32_t *phrase,
                                 size_t phrase_len,
                                 int32_t *out);

// Precision@k of a ranked 0/1 relevance list.
//
// # Safety
// `relevance` must be valid for `len` bytes.
enum CcStatus cc_precision_at_k(const uint8_t *relevance, size_t len, size_t k, double *out);

// nDCG@k of a ranked 0/1 relevance list.
//
// # Safety
// `relevance` must be valid for `len` bytes.
enum CcStatus cc_ndcg_at_k(const uint8_t *relevance, size_t len, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSALCAP_H */

#ifndef GENOLM_H
#define GENOLM_H

#include <stddef.h>
#include <stdint.h>

// Result codes. Values 2 to 4 match the command-line exit codes.
typedef enum GlmStatus {
  GLM_STATUS_OK = 0,
  // Null pointer, bad UTF-8 or an out-of-range argument.
  GLM_STATUS_INVALID_ARGUMENT = 1,
  // Malformed input data or an unreadable file.
  GLM_STATUS_INPUT_ERROR = 2,
  // The data cannot satisfy a constraint (too few clusters or examples).
  GLM_STATUS_DATA_CONSTRAINT = 3,
  // Failure while running a model or computing a metric.
  GLM_STATUS_RUNTIME_ERROR = 4,
  // The output buffer is too small; the needed size is reported.
  GLM_STATUS_BUFFER_TOO_SMALL = 5,
  // A Rust panic was caught at the boundary.
  GLM_STATUS_PANIC = 6,
} GlmStatus;

// Transformer loaded from a checkpoint.
typedef struct GlmModel GlmModel;

// Encoded token sequence.
typedef struct GlmTokens GlmTokens;

typedef struct GlmMetrics {
  double accuracy;
  double f1;
  double mcc;
  double balanced_accuracy;
} GlmMetrics;

typedef struct GlmSimilarity {
  double identity;
  double coverage;
} GlmSimilarity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *glm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *glm_version(void);

size_t glm_vocab_size(void);

// Length of the vector written by [`glm_kmer_frequencies`].
size_t glm_kmer_feature_dim(void);

// Tokenizes `sequence`. `max_tokens` of 0 means no limit.
//
// # Safety
// `sequence` must be a NUL-terminated string and `out` a valid pointer.
enum GlmStatus glm_encode(const char *sequence, size_t max_tokens, struct GlmTokens **out);

// Number of token ids in `tokens` (0 for null).
//
// # Safety
// `tokens` must be null or a handle from [`glm_encode`].
size_t glm_tokens_len(const struct GlmTokens *tokens);

// Borrowed pointer to the ids; valid while the handle lives.
//
// # Safety
// `tokens` must be null or a handle from [`glm_encode`].
const uint32_t *glm_tokens_ids(const struct GlmTokens *tokens);

// # Safety
// `tokens` must be null or a handle from [`glm_encode`] not yet freed.
void glm_tokens_free(struct GlmTokens *tokens);

// Turns token ids back into a nucleotide string. Special tokens are
// skipped. Free the result with [`glm_string_free`].
//
// # Safety
// `ids` must point to `len` readable values and `out` must be valid.
enum GlmStatus glm_decode(const uint32_t *ids, size_t len, char **out);

// # Safety
// `s` must be null or a string returned by this library not yet freed.
void glm_string_free(char *s);

// Accuracy, F1, MCC and balanced accuracy from class indices.
//
// # Safety
// `truth` and `predicted` must each point to `len` values; `out` must be
// valid.
enum GlmStatus glm_classification_metrics(const uint32_t *truth,
                                          const uint32_t *predicted,
                                          size_t len,
                                          size_t num_classes,
                                          struct GlmMetrics *out);

// Binary ROC AUC; `labels` holds 0 or 1 per score.
//
// # Safety
// `scores` and `labels` must each point to `len` values; `out` must be
// valid.
enum GlmStatus glm_auc_roc(const double *scores, const uint8_t *labels, size_t len, double *out);

// k-mer identity and coverage between two sequences.
//
// # Safety
// `a` and `b` must be NUL-terminated strings; `out` must be valid.
enum GlmStatus glm_similarity(const char *a, const char *b, size_t k, struct GlmSimilarity *out);

// Normalised k-mer frequencies for k = 3..7, concatenated.
//
// # Safety
// `sequence` must be NUL-terminated; `out` must hold `capacity` doubles;
// `written` may be null.
enum GlmStatus glm_kmer_frequencies(const char *sequence,
                                    double *out,
                                    size_t capacity,
                                    size_t *written);

// Loads a transformer checkpoint.
//
// # Safety
// `path` must be NUL-terminated and `out` valid.
enum GlmStatus glm_model_load(const char *path, struct GlmModel **out);

// Width of the vectors produced by [`glm_model_embed`] (0 for null).
//
// # Safety
// `model` must be null or a handle from [`glm_model_load`].
size_t glm_model_embedding_dim(const struct GlmModel *model);

// Mean-pooled embedding of one sequence.
//
// # Safety
// `model` must be a live handle, `sequence` NUL-terminated, `out` must hold
// `capacity` doubles and `written` may be null.
enum GlmStatus glm_model_embed(const struct GlmModel *model,
                               const char *sequence,
                               double *out,
                               size_t capacity,
                               size_t *written);

// # Safety
// `model` must be null or a handle from [`glm_model_load`] not yet freed.
void glm_model_free(struct GlmModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GENOLM_H */

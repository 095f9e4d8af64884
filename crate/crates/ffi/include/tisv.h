#ifndef TISV_H
#define TISV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes. The non-zero error values match the CLI exit codes.
 */
typedef enum TisvStatus {
  TISV_STATUS_OK = 0,
  /*
   Invalid configuration, shape or argument.
   */
  TISV_STATUS_CONFIG = 2,
  /*
   Unreadable or malformed data or checkpoint.
   */
  TISV_STATUS_DATA = 3,
  /*
   A null pointer where a value was required.
   */
  TISV_STATUS_NULL_ARGUMENT = 5,
  /*
   Internal failure; the message has details.
   */
  TISV_STATUS_INTERNAL = 6,
} TisvStatus;

/*
 A loaded embedding network.
 */
typedef struct TisvEmbedder TisvEmbedder;

/*
 An enrolled speaker.
 */
typedef struct TisvSpeakerModel TisvSpeakerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failing call on this thread; empty if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *tisv_last_error(void);

/*
 Loads an embedding checkpoint written by `tisv train-base` or `tisv finetune`.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum TisvStatus tisv_embedder_load(const char *path, struct TisvEmbedder **out);

/*
 # Safety
 `e` must come from [`tisv_embedder_load`] and not be used afterwards.
 */
void tisv_embedder_free(struct TisvEmbedder *e);

/*
 Embedding dimension, or 0 for a null handle.

 # Safety
 `e` must be null or a live handle.
 */
size_t tisv_embedder_dim(const struct TisvEmbedder *e);

/*
 Samples per input window, or 0 for a null handle. Longer inputs are
 center-cropped and shorter ones zero-padded.

 # Safety
 `e` must be null or a live handle.
 */
size_t tisv_embedder_input_len(const struct TisvEmbedder *e);

/*
 Embeds `n_samples` samples into `out`, which holds `out_len` values and
 must be at least the embedding dimension.

 # Safety
 Pointers must be valid for the given lengths.
 */
enum TisvStatus tisv_embed(const struct TisvEmbedder *e,
                           const double *samples,
                           size_t n_samples,
                           double *out,
                           size_t out_len);

/*
 Enrolls a speaker from `m` row-major embeddings of dimension `dim`.

 # Safety
 `embeddings` must hold `m * dim` values and `out` be a valid pointer.
 */
enum TisvStatus tisv_enroll(const double *embeddings,
                            size_t m,
                            size_t dim,
                            struct TisvSpeakerModel **out);

/*
 # Safety
 `m` must come from [`tisv_enroll`] and not be used afterwards.
 */
void tisv_model_free(struct TisvSpeakerModel *m);

/*
 Cosine similarity between a test embedding and the model centroid.

 # Safety
 `x` must hold `dim` values and `out` be a valid pointer.
 */
enum TisvStatus tisv_score(const struct TisvSpeakerModel *m,
                           const double *x,
                           size_t dim,
                           double *out);

/*
 Sets `accept` to 1 when `score > threshold`, else 0. The threshold must lie in [-1, 1].

 # Safety
 `accept` must be a valid pointer.
 */
enum TisvStatus tisv_decide(double score, double threshold, int32_t *accept);

/*
 Equal error rate (a fraction) and its threshold from target and impostor scores.

 # Safety
 Score arrays must hold the given counts; outputs must be valid pointers.
 */
enum TisvStatus tisv_compute_eer(const double *targets,
                                 size_t n_targets,
                                 const double *impostors,
                                 size_t n_impostors,
                                 double *eer,
                                 double *threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TISV_H */

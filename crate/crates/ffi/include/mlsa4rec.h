#ifndef MLSA4REC_H
#define MLSA4REC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MlsaStatus {
  MLSA_STATUS_OK = 0,
  MLSA_STATUS_NULL_POINTER = 1,
  MLSA_STATUS_INVALID_ARGUMENT = 2,
  MLSA_STATUS_SHAPE = 3,
  MLSA_STATUS_CONFIG = 4,
  MLSA_STATUS_IO = 5,
  MLSA_STATUS_CHECKPOINT = 6,
  MLSA_STATUS_DATA = 7,
  MLSA_STATUS_NON_FINITE = 8,
  MLSA_STATUS_INTERNAL = 9,
} MlsaStatus;

typedef enum MlsaVariant {
  MLSA_VARIANT_DEFAULT = 0,
  MLSA_VARIANT_V1 = 1,
  MLSA_VARIANT_V2 = 2,
  MLSA_VARIANT_V3 = 3,
  MLSA_VARIANT_V4 = 4,
} MlsaVariant;

// Opaque model handle.
typedef struct MlsaModel MlsaModel;

// Architecture hyperparameters; fill with `mlsa_model_config_default` first.
typedef struct MlsaModelConfig {
  size_t vocab_size;
  size_t max_len;
  size_t d_model;
  size_t d_state;
  size_t interests;
  size_t heads;
  size_t layers;
  size_t expand;
  size_t conv_kernel;
  double dropout;
  enum MlsaVariant variant;
  bool skip;
  bool per_head_theta;
  bool fresh_mlp1;
  size_t mlp_depth;
  bool freeze_padding;
} MlsaModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. Owned by the library.
const char *mlsa_last_error(void);

// Library version as a static NUL-terminated string.
const char *mlsa_version(void);

// Writes the default configuration (vocab_size 2: padding plus one item).
//
// # Safety
// `out` must be null or valid for writes.
enum MlsaStatus mlsa_model_config_default(struct MlsaModelConfig *out);

// Freshly initialized model. Free it with `mlsa_model_free`.
//
// # Safety
// `config` must be null or point to a valid config; `out` must be null or valid for writes.
enum MlsaStatus mlsa_model_new(const struct MlsaModelConfig *config,
                               uint64_t seed,
                               struct MlsaModel **out);

// Loads a model saved by `mlsa_model_save` or `mlsa4rec train --checkpoint`.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or valid for writes.
enum MlsaStatus mlsa_model_load(const char *path, struct MlsaModel **out);

// Writes the checkpoint to `path` and its configuration to `path` + ".config".
//
// # Safety
// `model` must be null or a live handle; `path` must be null or a NUL-terminated string.
enum MlsaStatus mlsa_model_save(const struct MlsaModel *model, const char *path);

// Number of item ids including the padding id 0.
//
// # Safety
// `model` must be null or a live handle; `out` must be null or valid for writes.
enum MlsaStatus mlsa_model_vocab_size(const struct MlsaModel *model, size_t *out);

// Next-item logits for `batch` sequences of `seq_len` ids stored row after row.
// `out` receives `batch * vocab_size` floats; `out_len` must equal that.
//
// # Safety
// `ids` must be valid for `batch * seq_len` reads and `out` for `out_len` writes.
enum MlsaStatus mlsa_model_score(const struct MlsaModel *model,
                                 const size_t *ids,
                                 size_t batch,
                                 size_t seq_len,
                                 float *out,
                                 size_t out_len);

// The `k` highest-scoring item ids for one sequence, best first; padding is
// never returned and ties go to the smaller id. Scores are written when
// `out_scores` is not null.
//
// # Safety
// `ids` must be valid for `seq_len` reads, `out_items` (and `out_scores` if
// non-null) for `k` writes.
enum MlsaStatus mlsa_model_top_k(const struct MlsaModel *model,
                                 const size_t *ids,
                                 size_t seq_len,
                                 size_t k,
                                 size_t *out_items,
                                 float *out_scores);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void mlsa_model_free(struct MlsaModel *model);

// HR, NDCG and MRR at cutoff `k` for a target ranked `rank` (1-based).
//
// # Safety
// Each output must be null or valid for writes; null outputs are skipped.
enum MlsaStatus mlsa_metrics_at_k(size_t rank, size_t k, double *hr, double *ndcg, double *mrr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLSA4REC_H */

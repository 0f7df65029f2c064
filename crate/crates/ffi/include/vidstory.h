#ifndef VIDSTORY_H
#define VIDSTORY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_DIMENSION_MISMATCH = 3,
  VS_STATUS_ZERO_VECTOR = 4,
  VS_STATUS_NON_FINITE = 5,
  VS_STATUS_EMPTY = 6,
  VS_STATUS_VALIDATION = 7,
  VS_STATUS_PHASE_ORDER = 8,
  VS_STATUS_UNKNOWN_ID = 9,
  VS_STATUS_IO = 10,
  VS_STATUS_PARSE = 11,
  VS_STATUS_PANIC = 12,
  // The call succeeded with a warning, e.g. a story with no clips.
  VS_STATUS_WARNING = 13,
} VsStatus;

// Opaque CIDEr document statistics.
typedef struct VsIdf VsIdf;

// Trained pipeline loaded from a run directory: context-aware embeddings,
// narrator and the training-sentence pool.
typedef struct VsModel VsModel;

// Opaque sentence pool.
typedef struct VsPool VsPool;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length without
// the terminator, or 0 when there is no error.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes.
size_t vs_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *vs_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer previously returned by this library and not
// yet freed.
void vs_string_free(char *s);

// Cosine similarity of two vectors of length `len`.
//
// # Safety
// `a` and `b` must point to `len` doubles; `out` must be writable.
enum VsStatus vs_cosine_similarity(const double *a, const double *b, size_t len, double *out);

// IoU of the frame sets covered by two span lists. Each list holds `n`
// half-open `[start, end)` pairs flattened as `start0, end0, start1, ...`.
//
// # Safety
// `a` and `b` must point to `2 * n_a` and `2 * n_b` values; `out` must be
// writable.
enum VsStatus vs_frame_iou(const size_t *a, size_t n_a, const size_t *b, size_t n_b, double *out);

// BLEU-1 to BLEU-4 of `candidate` against `n_refs` references, written to
// `out[0..4]`.
//
// # Safety
// Strings must be NUL-terminated UTF-8; `refs` must hold `n_refs` of them;
// `out` must point to 4 writable doubles.
enum VsStatus vs_bleu(const char *candidate, const char *const *refs, size_t n_refs, double *out);

// ROUGE-L of `candidate` against `n_refs` references.
//
// # Safety
// As for [`vs_bleu`], with `out` pointing to one double.
enum VsStatus vs_rouge_l(const char *candidate,
                         const char *const *refs,
                         size_t n_refs,
                         double *out);

// Builds document statistics from `n_docs` reference documents.
//
// # Safety
// `docs` must hold `n_docs` NUL-terminated strings; `out` must be writable.
enum VsStatus vs_idf_build(const char *const *docs, size_t n_docs, struct VsIdf **out);

// Loads document statistics saved by the command-line tool.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum VsStatus vs_idf_load(const char *path, struct VsIdf **out);

// # Safety
// `idf` must be NULL or a handle from `vs_idf_build`/`vs_idf_load`.
void vs_idf_free(struct VsIdf *idf);

// CIDEr of `candidate` against `n_refs` references.
//
// # Safety
// `idf` must be a live handle; otherwise as for [`vs_rouge_l`].
enum VsStatus vs_cider(const struct VsIdf *idf,
                       const char *candidate,
                       const char *const *refs,
                       size_t n_refs,
                       double *out);

// Pool of `n` sentences with row-major `n x dim` embeddings. Texts must be
// distinct.
//
// # Safety
// `texts` must hold `n` strings, `embeddings` `n * dim` doubles; `out` must
// be writable.
enum VsStatus vs_pool_new(const char *const *texts,
                          const double *embeddings,
                          size_t n,
                          size_t dim,
                          struct VsPool **out);

// # Safety
// `pool` must be NULL or a handle from `vs_pool_new`.
void vs_pool_free(struct VsPool *pool);

// Number of sentences in the pool, or 0 for NULL.
//
// # Safety
// `pool` must be NULL or a live handle.
size_t vs_pool_len(const struct VsPool *pool);

// Non-duplicate retrieval: writes one pool index per clip to `out`
// (length `c`).
//
// # Safety
// `clips` must hold `c * dim` doubles (row-major) and `out` `c` writable
// slots; `pool` must be a live handle.
enum VsStatus vs_knn_story(const struct VsPool *pool,
                           const double *clips,
                           size_t c,
                           size_t dim,
                           size_t k,
                           size_t *out);

// Loads the global and narrator checkpoints of a run directory.
//
// # Safety
// `run_dir` must be a NUL-terminated path; `out` must be writable.
enum VsStatus vs_model_load(const char *run_dir, struct VsModel **out);

// # Safety
// `model` must be NULL or a handle from `vs_model_load`.
void vs_model_free(struct VsModel *model);

// Story for a video of the run's dataset as a JSON array of records
// (`video_id`, `index`, `text`, `start`, `end`, `score`). Returns
// `Warning` with an empty array when no clip was selected.
//
// # Safety
// `model` must be a live handle, `video_id` a NUL-terminated string and
// `out_json` writable; free the result with [`vs_string_free`].
enum VsStatus vs_model_tell(const struct VsModel *model,
                            const char *video_id,
                            size_t k,
                            char **out_json);

// Story for raw frame features (`t x d`, row-major).
//
// # Safety
// `frames` must hold `t * d` doubles; otherwise as for [`vs_model_tell`].
enum VsStatus vs_model_tell_features(const struct VsModel *model,
                                     const double *frames,
                                     size_t t,
                                     size_t d,
                                     size_t k,
                                     char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIDSTORY_H */

#ifndef NNATTR_H
#define NNATTR_H

/* Generated by cbindgen from the nnattr-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum {
  NNATTR_OK = 0,
  /*
   A required pointer was null or a buffer length did not match.
   */
  NNATTR_INVALID_ARGUMENT = 1,
  /*
   Bad method name or parameters.
   */
  NNATTR_INVALID_CONFIG = 2,
  /*
   Malformed model, weight blob or pattern file.
   */
  NNATTR_MODEL_ERROR = 3,
  /*
   The analysis itself failed (missing patterns, non-finite values, ...).
   */
  NNATTR_ANALYSIS_ERROR = 4,
  /*
   A string argument was not valid UTF-8.
   */
  NNATTR_INVALID_UTF8 = 5,
  /*
   Unexpected internal failure.
   */
  NNATTR_INTERNAL = 6,
} nnattr_status;

/*
 Opaque model handle.
 */
typedef struct nnattr_model nnattr_model;

/*
 Opaque fitted-patterns handle.
 */
typedef struct nnattr_patterns nnattr_patterns;

/*
 Heap buffer returned to the caller; release with `nnattr_buffer_free`.
 */
typedef struct {
  uint8_t *data;
  size_t len;
} nnattr_buffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static C string.
 */
const char *nnattr_version(void);

/*
 Message of the most recent failure on this thread (empty if none).
 The pointer stays valid until the next failing call on the same thread.
 */
const char *nnattr_last_error(void);

/*
 Releases a buffer returned by this library. Null data is a no-op.
 */
void nnattr_buffer_free(nnattr_buffer buffer);

/*
 Parses and validates a model from a JSON manifest and weight blob.
 On success `*out_model` owns the handle; release with `nnattr_model_free`.
 */
nnattr_status nnattr_model_load(const uint8_t *manifest,
                                size_t manifest_len,
                                const uint8_t *blob,
                                size_t blob_len,
                                nnattr_model **out_model);

void nnattr_model_free(nnattr_model *model);

/*
 Number of dimensions of the model input.
 */
size_t nnattr_model_input_rank(const nnattr_model *model);

/*
 Total number of input elements.
 */
size_t nnattr_model_input_len(const nnattr_model *model);

/*
 Copies the input shape into `dims`, which must hold `rank` entries.
 */
nnattr_status nnattr_model_input_shape(const nnattr_model *model, size_t *dims, size_t rank);

/*
 Number of logits (length of the pre-softmax output).
 */
size_t nnattr_model_output_len(const nnattr_model *model);

/*
 Runs the forward pass and writes the pre-softmax logits.
 */
nnattr_status nnattr_forward(const nnattr_model *model,
                             const double *input,
                             size_t input_len,
                             double *out_logits,
                             size_t logits_len);

/*
 Computes an attribution.

 `method` is a method name (`gradient`, `lrp_epsilon`, ...); `params` is an
 optional `key=value,key=value` list; `select` is `"max"` (default when
 null) or a unit index. `patterns` may be null except for the pattern
 methods. The attribution is written to `out_attribution` (same length as
 the input) and the analyzed unit to `out_selected_unit` (may be null).
 */
nnattr_status nnattr_analyze(const nnattr_model *model,
                             const double *input,
                             size_t input_len,
                             const char *method,
                             const char *params,
                             const char *select,
                             uint64_t seed,
                             const nnattr_patterns *patterns,
                             double *out_attribution,
                             size_t out_len,
                             size_t *out_selected_unit);

/*
 Fits patterns from `n_samples` stacked inputs (row-major, each of
 `sample_len` = model input length).
 */
nnattr_status nnattr_patterns_fit(const nnattr_model *model,
                                  const double *samples,
                                  size_t n_samples,
                                  size_t sample_len,
                                  nnattr_patterns **out_patterns);

void nnattr_patterns_free(nnattr_patterns *patterns);

/*
 Serializes patterns to the manifest + blob format. Both buffers must be
 released with `nnattr_buffer_free`.
 */
nnattr_status nnattr_patterns_save(const nnattr_patterns *patterns,
                                   nnattr_buffer *out_manifest,
                                   nnattr_buffer *out_blob);

/*
 Loads a pattern file and validates it against the model.
 */
nnattr_status nnattr_patterns_load(const uint8_t *manifest,
                                   size_t manifest_len,
                                   const uint8_t *blob,
                                   size_t blob_len,
                                   const nnattr_model *model,
                                   nnattr_patterns **out_patterns);

/*
 Runs a perturbation curve for a precomputed attribution: regions of
 `region_h` x `region_w` are replaced by `value` in attribution order
 (descending, or a seeded random order when `random_order` is true).
 Writes `steps + 1` scores (scores[0] is the unperturbed logit) and the
 AOPC.
 */
nnattr_status nnattr_perturbation_curve(const nnattr_model *model,
                                        const double *input,
                                        size_t input_len,
                                        const double *attribution,
                                        size_t attribution_len,
                                        size_t selected_unit,
                                        size_t region_h,
                                        size_t region_w,
                                        size_t steps,
                                        double value,
                                        bool random_order,
                                        uint64_t seed,
                                        double *out_scores,
                                        double *out_aopc);

/*
 Renders values of the given shape (rank 1..3) as a binary PPM heatmap.
 Release the buffer with `nnattr_buffer_free`.
 */
nnattr_status nnattr_heatmap_ppm(const double *values,
                                 size_t values_len,
                                 const size_t *shape,
                                 size_t rank,
                                 nnattr_buffer *out_ppm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NNATTR_H */

#ifndef COUNTERLENS_H
#define COUNTERLENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClStatus {
  CL_STATUS_OK = 0,
  CL_STATUS_NULL_ARGUMENT = 1,
  CL_STATUS_INVALID_UTF8 = 2,
  CL_STATUS_PARSE_ERROR = 3,
  CL_STATUS_SEGMENT_ERROR = 4,
  CL_STATUS_ENGINE_ERROR = 5,
  CL_STATUS_SHAP_ERROR = 6,
  CL_STATUS_OUT_OF_RANGE = 7,
  /**
   * The valid count does not fit the output type.
   */
  CL_STATUS_OVERFLOW = 8,
  CL_STATUS_PANIC = 9,
} ClStatus;

/**
 * Realized counterfactuals with their inclusion vectors.
 */
typedef struct ClCounterfactuals ClCounterfactuals;

/**
 * Segment forest over one CoNLL-U document.
 */
typedef struct ClForest ClForest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cl_last_error_message(void);

/**
 * Builds a forest from CoNLL-U text with the default removability rules.
 * Several sentences share one document root.
 *
 * # Safety
 * `conllu` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClStatus cl_forest_from_conllu(const char *conllu, struct ClForest **out);

/**
 * # Safety
 * `forest` must come from this library and not be freed twice. Null is a
 * no-op.
 */
void cl_forest_free(struct ClForest *forest);

/**
 * Number of variable segments `M` (every segment except the root).
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_forest_dimension(const struct ClForest *forest, size_t *out);

/**
 * Number of valid counterfactual vectors, including alternative choices.
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_forest_count(const struct ClForest *forest, uint64_t *out);

/**
 * Indented outline of the segments, one per line. Free with
 * [`cl_string_free`].
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_forest_outline(const struct ClForest *forest, char **out);

/**
 * # Safety
 * `s` must come from this library. Null is a no-op.
 */
void cl_string_free(char *s);

/**
 * Collapses the branch under `segment` into it. Merging a leaf returns an
 * unchanged copy.
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_forest_merge(const struct ClForest *forest,
                              uint32_t segment,
                              struct ClForest **out);

/**
 * Undoes the most recent merge of `segment`.
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_forest_expand(const struct ClForest *forest,
                               uint32_t segment,
                               struct ClForest **out);

/**
 * Replaces the alternatives of leaf `segment` with `options[0..count]`.
 * `count == 0` clears them.
 *
 * # Safety
 * `forest` must be a live handle, `options` must point at `count`
 * NUL-terminated strings (or be null when `count` is 0) and `out` must be
 * valid.
 */
enum ClStatus cl_forest_set_alternatives(const struct ClForest *forest,
                                         uint32_t segment,
                                         const char *const *options,
                                         size_t count,
                                         struct ClForest **out);

/**
 * Every valid counterfactual, in lexicographic vector order. Fails with
 * `ENGINE_ERROR` when the count exceeds `cap`.
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_counterfactuals_enumerate(const struct ClForest *forest,
                                           size_t cap,
                                           struct ClCounterfactuals **out);

/**
 * `k` distinct counterfactuals drawn uniformly, deterministic in `seed`.
 *
 * # Safety
 * `forest` must be a live handle and `out` a valid pointer.
 */
enum ClStatus cl_counterfactuals_sample(const struct ClForest *forest,
                                        size_t k,
                                        uint64_t seed,
                                        struct ClCounterfactuals **out);

/**
 * # Safety
 * `list` must be a live handle or null (which yields 0).
 */
size_t cl_counterfactuals_len(const struct ClCounterfactuals *list);

/**
 * Text of item `index`, or null when out of range. Owned by the list.
 *
 * # Safety
 * `list` must be a live handle or null.
 */
const char *cl_counterfactuals_text(const struct ClCounterfactuals *list, size_t index);

/**
 * Writes the `M` inclusion bits of item `index` as 0/1 bytes.
 *
 * # Safety
 * `list` must be a live handle and `bits` must have room for `len` bytes.
 */
enum ClStatus cl_counterfactuals_bits(const struct ClCounterfactuals *list,
                                      size_t index,
                                      uint8_t *bits,
                                      size_t len);

/**
 * # Safety
 * `list` must come from this library and not be freed twice. Null is a
 * no-op.
 */
void cl_counterfactuals_free(struct ClCounterfactuals *list);

/**
 * Kernel weight of a coalition of size `s` among `m` players.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ClStatus cl_kernel_weight(size_t m, size_t s, double *out);

/**
 * Attributions from `rows` observations. `bits` is row-major `rows * m`
 * bytes (non-zero means included) and `outcomes` holds one probability per
 * row. Writes `phi0` and `m` values to `phi`.
 *
 * # Safety
 * The buffers must hold the sizes stated above.
 */
enum ClStatus cl_kernel_shap(const uint8_t *bits,
                             const double *outcomes,
                             size_t rows,
                             size_t m,
                             double *phi0,
                             double *phi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COUNTERLENS_H */

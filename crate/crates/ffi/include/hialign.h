#ifndef HIALIGN_H
#define HIALIGN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Ground costs between point sets.
 */
typedef enum HialignMetric {
  HIALIGN_METRIC_L2 = 0,
  HIALIGN_METRIC_L1 = 1,
  HIALIGN_METRIC_COSINE = 2,
  HIALIGN_METRIC_KL = 3,
} HialignMetric;

typedef enum HialignStatus {
  HIALIGN_STATUS_OK = 0,
  HIALIGN_STATUS_NULL_POINTER = 1,
  HIALIGN_STATUS_INVALID_ARGUMENT = 2,
  HIALIGN_STATUS_DIMENSION = 3,
  HIALIGN_STATUS_NUMERICAL = 4,
  HIALIGN_STATUS_IO = 5,
  HIALIGN_STATUS_FORMAT = 6,
  HIALIGN_STATUS_PANIC = 7,
} HialignStatus;

/**
 * A trained model with its vocabulary.
 */
typedef struct HialignModel HialignModel;

/**
 * Solver settings. `exact` ignores the Sinkhorn fields and needs balanced masses.
 */
typedef struct HialignOtOptions {
  double sigma;
  double tau;
  uint32_t max_iter;
  double tol;
  bool unbalanced;
  bool exact;
  enum HialignMetric metric;
} HialignOtOptions;

typedef struct HialignMetrics {
  double bleu1;
  double bleu2;
  double bleu3;
  double bleu4;
  double rouge_l;
  double cider_d;
  double meteor_lite;
  double ce_precision;
  double ce_recall;
  double ce_f1;
} HialignMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null when none.
 * Release with `hialign_string_free`.
 */
char *hialign_last_error_message(void);

/**
 * Caller contract: `s` must come from this library and not have been freed; null is ignored.
 */
void hialign_string_free(char *s);

/**
 * Library version as a static nul-terminated string.
 */
const char *hialign_version(void);

/**
 * Defaults of the Sinkhorn solver under an L2 ground cost.
 */
struct HialignOtOptions hialign_ot_options_default(void);

/**
 * Transport between `n` points `x` and `m` points `y` (row-major, width `d`)
 * under uniform weights. Writes the cost to `out_cost` and, when `out_plan`
 * is not null, the `n×m` plan row-major.
 * Caller contract: `x` holds `n*d` values, `y` holds `m*d`, `out_plan` has room for `n*m`.
 */
enum HialignStatus hialign_transport(const double *x,
                                     size_t n,
                                     const double *y,
                                     size_t m,
                                     size_t d,
                                     const struct HialignOtOptions *options,
                                     double *out_cost,
                                     double *out_plan);

/**
 * Corpus metrics of `n` candidate reports against `n` references, with the
 * bundled finding lexicon for the clinical-efficacy proxy.
 * Caller contract: `candidates` and `references` each point to `n` nul-terminated strings.
 */
enum HialignStatus hialign_evaluate(const char *const *candidates,
                                    const char *const *references,
                                    size_t n,
                                    struct HialignMetrics *out);

/**
 * Load a checkpoint directory written by `hialign train`.
 * Caller contract: `dir` is a nul-terminated path; `out` receives the handle.
 */
enum HialignStatus hialign_model_load(const char *dir, struct HialignModel **out);

/**
 * Caller contract: `model` comes from `hialign_model_load` and is not used afterwards; null is ignored.
 */
void hialign_model_free(struct HialignModel *model);

/**
 * Vocabulary size of a loaded model, 0 for null.
 * Caller contract: `model` is null or a live handle.
 */
size_t hialign_model_vocab_size(const struct HialignModel *model);

/**
 * Generate a report for a grayscale image of `height×width` pixels in
 * [0, 1], row-major. `beam_width` 0 decodes greedily. The report is
 * written to `out` and released with `hialign_string_free`.
 * Caller contract: `model` is a live handle and `pixels` holds `height*width` values.
 */
enum HialignStatus hialign_model_generate(const struct HialignModel *model,
                                          const double *pixels,
                                          size_t height,
                                          size_t width,
                                          size_t beam_width,
                                          char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIALIGN_H */

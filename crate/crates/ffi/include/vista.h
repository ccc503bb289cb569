#ifndef VISTA_H
#define VISTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VistaStatus {
  VISTA_STATUS_OK = 0,
  VISTA_STATUS_NULL_POINTER = 1,
  VISTA_STATUS_INVALID_ARGUMENT = 2,
  VISTA_STATUS_PARSE = 3,
  VISTA_STATUS_IO = 4,
  VISTA_STATUS_NUMERIC = 5,
  VISTA_STATUS_RENDER = 6,
  VISTA_STATUS_STAGE = 7,
  VISTA_STATUS_INVALID_UTF8 = 8,
  VISTA_STATUS_PANIC = 9,
} VistaStatus;

/**
 * Validated atlas bundle manifest.
 */
typedef struct VistaBundle VistaBundle;

/**
 * Pipeline configuration.
 */
typedef struct VistaConfig VistaConfig;

/**
 * Mutual-kNN gain curve.
 */
typedef struct VistaGainCurve VistaGainCurve;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *vista_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vista_version(void);

/**
 * Default configuration for a corpus, latent and output directory.
 *
 * # Safety
 * `corpus` and `out_dir` must be NUL-terminated strings; `out` must be writable.
 */
enum VistaStatus vista_config_new(const char *corpus,
                                  uint32_t dim,
                                  uint32_t latent_id,
                                  const char *out_dir,
                                  struct VistaConfig **out);

/**
 * Reads a JSON configuration; relative paths resolve against its directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VistaStatus vista_config_load(const char *path, struct VistaConfig **out);

/**
 * Sets the layout and panorama seeds.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum VistaStatus vista_config_set_seed(struct VistaConfig *cfg, uint64_t seed);

/**
 * Keeps the `count` most activating items.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum VistaStatus vista_config_set_selection_count(struct VistaConfig *cfg, size_t count);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum VistaStatus vista_config_validate(const struct VistaConfig *cfg);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void vista_config_free(struct VistaConfig *cfg);

/**
 * Runs the whole pipeline; the bundle lands in the configured output
 * directory.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum VistaStatus vista_run(const struct VistaConfig *cfg);

/**
 * Gain curve between two 2D embeddings of the same `n` points, given as
 * interleaved `x, y` arrays of length `2 n`.
 *
 * # Safety
 * `a` and `b` must hold `2 * n` doubles, `fractions` `n_fractions` doubles;
 * `out` must be writable.
 */
enum VistaStatus vista_gain_curve_compute(const double *a,
                                          const double *b,
                                          size_t n,
                                          const double *fractions,
                                          size_t n_fractions,
                                          struct VistaGainCurve **out);

/**
 * Number of points on the curve; 0 for a null handle.
 *
 * # Safety
 * `curve` must be null or a live handle.
 */
size_t vista_gain_curve_len(const struct VistaGainCurve *curve);

/**
 * Reads point `index`. Any output pointer may be null.
 *
 * # Safety
 * `curve` must be a live handle; non-null outputs must be writable.
 */
enum VistaStatus vista_gain_curve_point(const struct VistaGainCurve *curve,
                                        size_t index,
                                        double *k_fraction,
                                        size_t *k,
                                        double *mknn,
                                        double *gain);

/**
 * Index of the maximal-gain point, smallest k on ties.
 *
 * # Safety
 * `curve` must be a live handle; `index` must be writable.
 */
enum VistaStatus vista_gain_curve_argmax(const struct VistaGainCurve *curve, size_t *index);

/**
 * # Safety
 * `curve` must be null or a handle not yet freed.
 */
void vista_gain_curve_free(struct VistaGainCurve *curve);

/**
 * Opens and validates an atlas bundle directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum VistaStatus vista_bundle_open(const char *dir, struct VistaBundle **out);

/**
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t vista_bundle_item_count(const struct VistaBundle *bundle);

/**
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t vista_bundle_cluster_count(const struct VistaBundle *bundle);

/**
 * Number of pyramid levels.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t vista_bundle_level_count(const struct VistaBundle *bundle);

/**
 * # Safety
 * `bundle` must be null or a handle not yet freed.
 */
void vista_bundle_free(struct VistaBundle *bundle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VISTA_H */

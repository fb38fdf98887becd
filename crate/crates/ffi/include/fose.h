#ifndef FOSE_H
#define FOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum FoseStatus {
  FOSE_STATUS_OK = 0,
  FOSE_STATUS_NULL_POINTER = 1,
  FOSE_STATUS_INVALID_ARGUMENT = 2,
  FOSE_STATUS_CONFIG = 3,
  FOSE_STATUS_IO = 4,
  FOSE_STATUS_RUNTIME = 5,
  FOSE_STATUS_PANIC = 6,
} FoseStatus;

/**
 * Fusion method for [`fose_fuse`].
 */
typedef enum FoseMethod {
  FOSE_METHOD_EXP = 0,
  FOSE_METHOD_OSD = 1,
  FOSE_METHOD_E2E = 2,
  FOSE_METHOD_FOSE = 3,
} FoseMethod;

/**
 * Noise used to start one-step inference.
 */
typedef enum FoseNoise {
  FOSE_NOISE_ZERO = 0,
  FOSE_NOISE_RANDOM = 1,
} FoseNoise;

/**
 * Opaque configuration handle.
 */
typedef struct FoseConfigHandle FoseConfigHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fose_version(void);

/**
 * Message of the last failed call on this thread (empty after a success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *fose_last_error(void);

/**
 * Built-in defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
enum FoseStatus fose_config_default(struct FoseConfigHandle **out);

/**
 * Parses a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` as in
 * [`fose_config_default`].
 */
enum FoseStatus fose_config_load(const char *path, struct FoseConfigHandle **out);

/**
 * Redirects the data and run roots of a configuration.
 *
 * # Safety
 * `cfg` must come from this library; the strings must be NUL-terminated
 * UTF-8 or null to keep the current value.
 */
enum FoseStatus fose_config_set_roots(struct FoseConfigHandle *cfg,
                                      const char *data_root,
                                      const char *run_root);

/**
 * Number of spectral bands of a configuration, or 0 for a null handle.
 *
 * # Safety
 * `cfg` must be null or come from this library.
 */
size_t fose_config_bands(const struct FoseConfigHandle *cfg);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `cfg` must be null or come from this library and not be used afterwards.
 */
void fose_config_free(struct FoseConfigHandle *cfg);

/**
 * Writes the synthetic train/val/test splits under the data root.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum FoseStatus fose_synthesize(const struct FoseConfigHandle *cfg);

/**
 * Trains one stage (1 to 4).
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum FoseStatus fose_train_stage(const struct FoseConfigHandle *cfg, uint8_t stage, bool resume);

/**
 * Fuses `n` images. `lms` and `out` hold `n * bands * h * w` values, `pan`
 * holds `n * h * w`.
 *
 * # Safety
 * `cfg` must come from this library and the buffers must have the stated
 * lengths.
 */
enum FoseStatus fose_fuse(const struct FoseConfigHandle *cfg,
                          enum FoseMethod method,
                          enum FoseNoise noise,
                          uint64_t seed,
                          const float *lms,
                          const float *pan,
                          size_t n,
                          size_t h,
                          size_t w,
                          float *out);

/**
 * Mean spectral angle in degrees of one `[c, h, w]` image pair.
 *
 * # Safety
 * Both buffers must hold `c * h * w` values and `out` must be writable.
 */
enum FoseStatus fose_sam(const float *fused,
                         const float *reference,
                         size_t c,
                         size_t h,
                         size_t w,
                         double *out);

/**
 * ERGAS of one `[c, h, w]` image pair at the given resolution ratio.
 *
 * # Safety
 * As for [`fose_sam`].
 */
enum FoseStatus fose_ergas(const float *fused,
                           const float *reference,
                           size_t c,
                           size_t h,
                           size_t w,
                           size_t ratio,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOSE_H */

#ifndef PIXGAN_H
#define PIXGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PixganStatus {
  PIXGAN_STATUS_OK = 0,
  PIXGAN_STATUS_NULL_POINTER = 1,
  PIXGAN_STATUS_INVALID_ARGUMENT = 2,
  PIXGAN_STATUS_DIMENSION = 3,
  PIXGAN_STATUS_IO = 4,
  PIXGAN_STATUS_CHECKPOINT = 5,
  PIXGAN_STATUS_PARSE = 6,
  PIXGAN_STATUS_NUMERICAL = 7,
  PIXGAN_STATUS_UNDEFINED_METRIC = 8,
  PIXGAN_STATUS_INTERNAL = 9,
} PixganStatus;

/**
 * Opaque generator handle.
 */
typedef struct PixganGenerator PixganGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a successful call.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pixgan_last_error(void);

/**
 * Loads a generator checkpoint. On success `*out` owns a handle to release with
 * [`pixgan_generator_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum PixganStatus pixgan_generator_load(const char *path, struct PixganGenerator **out);

/**
 * # Safety
 * `handle` must come from [`pixgan_generator_load`] and not be used afterwards. Null is a no-op.
 */
void pixgan_generator_free(struct PixganGenerator *handle);

/**
 * Image side length of a loaded generator, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
size_t pixgan_generator_side(const struct PixganGenerator *handle);

/**
 * Generates `count` images conditioned on one constraint map into `out`
 * (`count × side × side` floats), with latent vectors drawn from `seed`.
 *
 * # Safety
 * `values`, `mask` must hold `side²` elements and `out` must have room for `out_len` floats.
 */
enum PixganStatus pixgan_generator_generate(const struct PixganGenerator *handle,
                                            const float *values,
                                            const uint8_t *mask,
                                            size_t side,
                                            size_t count,
                                            uint64_t seed,
                                            float *out,
                                            size_t out_len);

/**
 * Squared masked residual `‖C − M(C)⊙X‖²` of one image.
 *
 * # Safety
 * `values`, `mask`, `generated` must hold `side²` elements; `out` must be writable.
 */
enum PixganStatus pixgan_constraint_penalty(const float *values,
                                            const uint8_t *mask,
                                            const float *generated,
                                            size_t side,
                                            double *out);

/**
 * Mean squared error over the constrained pixels; fails for an empty map.
 *
 * # Safety
 * As [`pixgan_constraint_penalty`].
 */
enum PixganStatus pixgan_constraint_mse(const float *values,
                                        const uint8_t *mask,
                                        const float *generated,
                                        size_t side,
                                        double *out);

/**
 * Fréchet distance between two Gaussians given as means of length `dim` and row-major
 * `dim × dim` covariances.
 *
 * # Safety
 * Mean arrays hold `dim` and covariance arrays `dim²` doubles; `out` must be writable.
 */
enum PixganStatus pixgan_fid(const double *mu_r,
                             const double *sigma_r,
                             const double *mu_g,
                             const double *sigma_g,
                             size_t dim,
                             double *out);

/**
 * `sqrt(fid² + mse)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum PixganStatus pixgan_selection_score(double fid, double mse, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIXGAN_H */

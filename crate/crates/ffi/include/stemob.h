#ifndef STEMOB_H
#define STEMOB_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum StemStatus {
  STEM_STATUS_OK = 0,
  STEM_STATUS_NULL_POINTER = 1,
  STEM_STATUS_INVALID_ARGUMENT = 2,
  STEM_STATUS_OUT_OF_RANGE = 3,
  STEM_STATUS_SHAPE_MISMATCH = 4,
  STEM_STATUS_IO = 5,
  STEM_STATUS_FORMAT = 6,
  STEM_STATUS_DEGENERATE = 7,
  STEM_STATUS_PANIC = 8,
} StemStatus;

typedef enum StemScheduleKind {
  STEM_SCHEDULE_KIND_LINEAR = 0,
  STEM_SCHEDULE_KIND_COSINE = 1,
} StemScheduleKind;

typedef enum StemMethod {
  STEM_METHOD_DDPM = 0,
  STEM_METHOD_DDIM = 1,
} StemMethod;

/**
 * Opaque tensor of `f32` values.
 */
typedef struct StemLatent StemLatent;

/**
 * Opaque noise schedule.
 */
typedef struct StemSchedule StemSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *stem_last_error(void);

/**
 * Schedule of `steps` steps with default parameters for `kind`.
 */
enum StemStatus stem_schedule_new(enum StemScheduleKind kind,
                                  size_t steps,
                                  struct StemSchedule **out);

void stem_schedule_free(struct StemSchedule *schedule);

/**
 * Number of steps, or 0 for a null handle.
 */
size_t stem_schedule_steps(const struct StemSchedule *schedule);

/**
 * Cumulative signal fraction at step `t` in `0..=steps`.
 */
enum StemStatus stem_schedule_alpha_bar(const struct StemSchedule *schedule, size_t t, double *out);

/**
 * Copies `prod(shape)` values from `data` into a new latent.
 */
enum StemStatus stem_latent_new(const size_t *shape,
                                size_t ndim,
                                const float *data,
                                struct StemLatent **out);

void stem_latent_free(struct StemLatent *latent);

/**
 * Number of values, or 0 for a null handle.
 */
size_t stem_latent_len(const struct StemLatent *latent);

/**
 * Number of dimensions, or 0 for a null handle.
 */
size_t stem_latent_ndim(const struct StemLatent *latent);

/**
 * Writes the shape into `out`, which must hold `capacity >= ndim` entries.
 */
enum StemStatus stem_latent_shape(const struct StemLatent *latent, size_t *out, size_t capacity);

/**
 * Borrowed pointer to the values, valid while the handle lives.
 */
const float *stem_latent_data(const struct StemLatent *latent);

/**
 * Loads a `.png` (RGB8, mapped to `[-1, 1]`) or `.stem` tensor file.
 */
enum StemStatus stem_latent_load(const char *path, struct StemLatent **out);

/**
 * Saves a `3 x H x W` latent as an RGB8 PNG, clamping to `[-1, 1]`.
 */
enum StemStatus stem_latent_save_png(const struct StemLatent *latent, const char *path);

/**
 * Writes a lossless `.stem` tensor file.
 */
enum StemStatus stem_latent_write_tensor(const struct StemLatent *latent, const char *path);

/**
 * Single-shot DDPM inversion of `x` to step `t`.
 */
enum StemStatus stem_ddpm_invert(const struct StemLatent *x,
                                 const struct StemSchedule *schedule,
                                 size_t t,
                                 uint64_t seed,
                                 uint64_t stream_id,
                                 struct StemLatent **out);

/**
 * Partial inversion with `t_stop` of the schedule's steps, using the
 * default DDIM predictor for [`StemMethod::Ddim`].
 */
enum StemStatus stem_preprocess(const struct StemLatent *x,
                                const struct StemSchedule *schedule,
                                enum StemMethod method,
                                size_t t_stop,
                                uint64_t seed,
                                uint64_t stream_id,
                                struct StemLatent **out);

/**
 * Attribute loss between `x` and `y` at step `t` under the noise model of `method`.
 */
enum StemStatus stem_attribute_loss(const struct StemLatent *x,
                                    const struct StemLatent *y,
                                    const struct StemSchedule *schedule,
                                    enum StemMethod method,
                                    size_t t,
                                    double *out);

/**
 * First step whose attribute loss exceeds `rho`; writes 0 when none does.
 */
enum StemStatus stem_tau(const struct StemLatent *x,
                         const struct StemLatent *y,
                         const struct StemSchedule *schedule,
                         enum StemMethod method,
                         double rho,
                         size_t *out);

/**
 * Stream id the batch pipeline derives from a record id.
 */
uint64_t stem_stream_id(const char *record_id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEMOB_H */

#ifndef FIXLAB_H
#define FIXLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FixlabStatus {
  FIXLAB_STATUS_OK = 0,
  FIXLAB_STATUS_NULL_POINTER = 1,
  FIXLAB_STATUS_INVALID_UTF8 = 2,
  FIXLAB_STATUS_CONFIG = 3,
  FIXLAB_STATUS_SHAPE = 4,
  FIXLAB_STATUS_RANGE = 5,
  FIXLAB_STATUS_FORMAT = 6,
  FIXLAB_STATUS_PRECONDITION = 7,
  FIXLAB_STATUS_NON_FINITE = 8,
  FIXLAB_STATUS_COUNTS = 9,
  FIXLAB_STATUS_IO = 10,
  FIXLAB_STATUS_CHECK = 11,
  // A Rust panic was caught at the boundary.
  FIXLAB_STATUS_INTERNAL = 12,
  // The caller's output buffer is too small.
  FIXLAB_STATUS_BUFFER_TOO_SMALL = 13,
} FixlabStatus;

// Opaque handle to a network with `f32` parameters.
typedef struct FixlabModel FixlabModel;

// Outcome of one attack.
typedef struct FixlabAttackOutcome {
  // 1 when the returned image satisfies the criterion within the budget.
  uint8_t success;
  uint32_t iterations;
  double l1;
  double l2;
  double linf;
} FixlabAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length, or 0 when no
// error has been recorded.
uintptr_t fixlab_last_error(char *buf, uintptr_t len);

// Library version as a static NUL-terminated string.
const char *fixlab_version(void);

// Builds a freshly initialized model of `family` (e.g. `"retinal"`) with a
// desk backbone of base width `width` for `side × side` RGB images.
enum FixlabStatus fixlab_model_new(const char *family,
                                   uintptr_t side,
                                   uintptr_t classes,
                                   uintptr_t width,
                                   uint64_t seed,
                                   struct FixlabModel **out);

// Builds a model from a JSON model spec, as stored in run manifests.
enum FixlabStatus fixlab_model_from_spec_json(const char *json,
                                              uint64_t seed,
                                              struct FixlabModel **out);

// Releases a model; null is ignored.
void fixlab_model_free(struct FixlabModel *model);

// Replaces the parameters with those of a checkpoint file.
enum FixlabStatus fixlab_model_load(struct FixlabModel *model, const char *path);

// Writes the parameters to a checkpoint file.
enum FixlabStatus fixlab_model_save(const struct FixlabModel *model, const char *path);

uintptr_t fixlab_model_classes(const struct FixlabModel *model);

uintptr_t fixlab_model_image_side(const struct FixlabModel *model);

// Evaluation-mode logits (fixation ensemble) for `batch` images; `logits`
// must hold `batch × classes` values.
enum FixlabStatus fixlab_model_predict(const struct FixlabModel *model,
                                       const float *images,
                                       uintptr_t batch,
                                       float *logits,
                                       uintptr_t logits_len);

// Attacks one image with an attack described as JSON, for example
// `{"algorithm":"pgd","metric":"linf","iterations":5,"step_const":0.1,
// "eps":0.01,"criterion":"misclassify_1"}`. `adversarial` receives the
// attacked image on success and a copy of the input otherwise.
enum FixlabStatus fixlab_attack(const struct FixlabModel *model,
                                const char *config_json,
                                const float *image,
                                uintptr_t label,
                                uint64_t seed,
                                float *adversarial,
                                struct FixlabAttackOutcome *outcome);

// Source radius of the foveal warp for output radius `r_out`.
enum FixlabStatus fixlab_radial_warp(double r_out, double r_norm, double strength, double *out);

// Foveated resampling of one `channels × height × width` image about the
// fixation `(dx, dy)` from the center; `out` has the input's size.
enum FixlabStatus fixlab_retinal_resample(const float *image,
                                          uintptr_t channels,
                                          uintptr_t height,
                                          uintptr_t width,
                                          double dx,
                                          double dy,
                                          double strength,
                                          float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIXLAB_H */

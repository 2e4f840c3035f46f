#ifndef REARRANGE_H
#define REARRANGE_H

#include <stddef.h>
#include <stdint.h>

typedef enum rr_status {
  RR_STATUS_OK = 0,
  RR_STATUS_NULL_ARGUMENT = 1,
  RR_STATUS_INVALID_UTF8 = 2,
  RR_STATUS_PARSE = 3,
  RR_STATUS_INVALID_INPUT = 4,
  RR_STATUS_MISMATCH = 5,
  RR_STATUS_IO = 6,
  RR_STATUS_CHECKPOINT = 7,
  RR_STATUS_PANIC = 8,
} rr_status;

// A loaded denoiser.
typedef struct rr_model rr_model;

// A scene owned by the library.
typedef struct rr_scene rr_scene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library on the same thread.
const char *rr_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void rr_string_free(char *s);

// Parses a scene from JSON.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a writable pointer.
enum rr_status rr_scene_from_json(const char *json, struct rr_scene **out);

// Serializes a scene to JSON; free the result with [`rr_string_free`].
//
// # Safety
// `scene` must be a live handle; `out` a writable pointer.
enum rr_status rr_scene_to_json(const struct rr_scene *scene, char **out);

// # Safety
// `scene` must be a live handle; `out` a writable pointer.
enum rr_status rr_scene_object_count(const struct rr_scene *scene, size_t *out);

// # Safety
// `scene` must be null or a handle from this library, not yet freed.
void rr_scene_free(struct rr_scene *scene);

// Generates a clean Table-Chair scene. `variant` is one of
// `symmetry-parallelism`, `uniform-spacing`, `grouping-by-shape`.
//
// # Safety
// `variant` must be a NUL-terminated string; `out` a writable pointer.
enum rr_status rr_generate_scene(const char *variant, uint64_t seed, struct rr_scene **out);

// Perturbs a scene with the two-mode Table-Chair noise kernel.
//
// # Safety
// `scene` must be a live handle; `out` a writable pointer.
enum rr_status rr_perturb_scene(const struct rr_scene *scene, uint64_t seed, struct rr_scene **out);

// Loads a denoiser checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a writable pointer.
enum rr_status rr_model_load(const char *path, struct rr_model **out);

// # Safety
// `model` must be null or a handle from this library, not yet freed.
void rr_model_free(struct rr_model *model);

// Denoises `scene`. `schedule` names a preset (`living-room`, `bedroom`,
// `table-chair`); `inference` is `direct`, `grad` or `grad-noise`.
// `out_iterations` may be null.
//
// # Safety
// Handles must be live, strings NUL-terminated, `out` writable.
enum rr_status rr_denoise(const struct rr_model *model,
                          const struct rr_scene *scene,
                          const char *schedule,
                          const char *inference,
                          uint64_t seed,
                          struct rr_scene **out,
                          size_t *out_iterations);

// Mean per-object transport distance between two scenes with equal class
// multisets.
//
// # Safety
// Handles must be live; `out` writable.
enum rr_status rr_emd_to_gt(const struct rr_scene *pred, const struct rr_scene *gt, double *out);

// Fraction of sampled subsets of size `n` (2 or 3) whose coordinates admit
// a shift-invariant integer relation with coefficients below `eta`.
//
// # Safety
// `scene` must be a live handle; `out` writable.
enum rr_status rr_relation_rate(const struct rr_scene *scene,
                                size_t n,
                                int64_t eta,
                                double epsilon,
                                size_t samples,
                                uint64_t seed,
                                double *out);

// Library version as a static NUL-terminated string.
const char *rr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REARRANGE_H */

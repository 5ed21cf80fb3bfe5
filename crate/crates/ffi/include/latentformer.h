#ifndef LATENTFORMER_H
#define LATENTFORMER_H

/* Generated by cbindgen from the latentformer-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result class of an API call. Numeric values are stable and mirror the
// command-line exit codes for the shared classes (3..=6).
typedef enum lf_status {
  LF_OK = 0,
  LF_NULL_ARGUMENT = 1,
  LF_INVALID_UTF8 = 2,
  LF_IO = 3,
  LF_CONFIG = 4,
  LF_DATA = 5,
  LF_INTERNAL = 6,
  LF_BUFFER_TOO_SMALL = 7,
} lf_status;

// Loaded model plus its checkpoint configuration.
typedef struct lf_model lf_model;

// Parsed scene-set file.
typedef struct lf_scene_set lf_scene_set;

// Aggregate displacement errors over an evaluation run. `min_*` take the
// best of the K samples per agent, `avg_*` the mean, both averaged over
// all agents of all scenes. An exact minimum of zero means every scene
// had a perfect sample.
typedef struct lf_metrics {
  double min_ade;
  double avg_ade;
  double min_fde;
  double avg_fde;
} lf_metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Load a model from a checkpoint directory into `*out`.
//
// # Safety
// `checkpoint_dir` must be null or NUL-terminated; `out` must be a valid
// pointer to pointer storage.
enum lf_status lf_model_load(const char *checkpoint_dir, struct lf_model **out);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must be null or a pointer obtained from [`lf_model_load`] that
// has not been freed yet.
void lf_model_free(struct lf_model *model);

// Load a scene-set file into `*out`.
//
// # Safety
// `path` must be null or NUL-terminated; `out` must be valid storage.
enum lf_status lf_scene_set_load(const char *path, struct lf_scene_set **out);

// Release a scene-set handle. Null is a no-op.
//
// # Safety
// `set` must be null or an unfreed pointer from [`lf_scene_set_load`].
void lf_scene_set_free(struct lf_scene_set *set);

// Mode count and prediction horizon of a loaded model.
//
// # Safety
// All pointers must be null or valid for writes.
enum lf_status lf_model_info(const struct lf_model *model, size_t *k_modes, size_t *horizon);

// Scene count, number of observed past steps, and horizon of a scene set.
//
// # Safety
// All pointers must be null or valid for writes.
enum lf_status lf_scene_set_info(const struct lf_scene_set *set,
                                 size_t *scenes,
                                 size_t *tau,
                                 size_t *horizon);

// Agent count of one scene.
//
// # Safety
// `set` and `agents` must be null or valid pointers.
enum lf_status lf_scene_agent_count(const struct lf_scene_set *set,
                                    size_t scene_index,
                                    size_t *agents);

// K deterministic mode-conditioned rollouts for one scene.
//
// `points` receives `k * agents * horizon * 2` doubles laid out sample-major,
// then agent-major, then time, then x,y. `capacity` is the buffer length in
// doubles. `*written` always receives the required length; when the buffer
// is too small nothing is written and the call returns `LfBufferTooSmall`.
//
// # Safety
// `points` must be valid for `capacity` writes; other pointers null or valid.
enum lf_status lf_predict(const struct lf_model *model,
                          const struct lf_scene_set *set,
                          size_t scene_index,
                          size_t k,
                          double *points,
                          size_t capacity,
                          size_t *written);

// Score the model over every scene with K mean rollouts per scene.
//
// # Safety
// `out` must be null or valid for writes.
enum lf_status lf_evaluate(const struct lf_model *model,
                           const struct lf_scene_set *set,
                           size_t k,
                           struct lf_metrics *out);

// Copy the calling thread's last error message into `buf`, always
// NUL-terminated, truncating if needed. Returns the full message length in
// bytes (excluding the NUL), so a return >= `capacity` means truncation.
// With a null or zero-length buffer it just reports the length.
//
// # Safety
// `buf` must be valid for `capacity` writes, or null.
size_t lf_last_error(char *buf, size_t capacity);

// Static library version string.
const char *lf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTFORMER_H */

#ifndef HRN_H
#define HRN_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HrnStatus {
  HRN_STATUS_OK = 0,
  HRN_STATUS_INVALID_ARGUMENT = 1,
  HRN_STATUS_INVALID_STATE = 2,
  HRN_STATUS_IO = 3,
  HRN_STATUS_FORMAT = 4,
  HRN_STATUS_CONFIG = 5,
  HRN_STATUS_DIVERGED = 6,
  HRN_STATUS_NON_FINITE = 7,
  HRN_STATUS_NULL_POINTER = 8,
  HRN_STATUS_PANIC = 9,
} HrnStatus;

// A trained model loaded from a checkpoint directory.
typedef struct HrnModel HrnModel;

// A trajectory: scene header plus frames.
typedef struct HrnTrajectory HrnTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *hrn_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hrn_version(void);

// Generates a trajectory of a named scenario with its default parameters.
//
// # Safety
// `scenario` must be a NUL-terminated string and `out` a valid pointer.
enum HrnStatus hrn_trajectory_generate(const char *scenario,
                                       uint64_t seed,
                                       size_t n_frames,
                                       struct HrnTrajectory **out);

// Reads a trajectory file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum HrnStatus hrn_trajectory_read(const char *path, struct HrnTrajectory **out);

// Writes a trajectory file.
//
// # Safety
// `t` must be a live handle and `path` a NUL-terminated string.
enum HrnStatus hrn_trajectory_write(const struct HrnTrajectory *t, const char *path);

// Releases a trajectory handle. NULL is ignored.
//
// # Safety
// `t` must be NULL or a handle not yet freed.
void hrn_trajectory_free(struct HrnTrajectory *t);

// Frame count, or 0 for NULL.
//
// # Safety
// `t` must be NULL or a live handle.
size_t hrn_trajectory_n_frames(const struct HrnTrajectory *t);

// Particle count, or 0 for NULL.
//
// # Safety
// `t` must be NULL or a live handle.
size_t hrn_trajectory_n_particles(const struct HrnTrajectory *t);

// Copies frame `frame`'s positions as `n_particles * 3` doubles into `buf`.
//
// # Safety
// `t` must be a live handle and `buf` must hold `len` doubles.
enum HrnStatus hrn_trajectory_positions(const struct HrnTrajectory *t,
                                        size_t frame,
                                        double *buf,
                                        size_t len);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum HrnStatus hrn_model_load(const char *dir, struct HrnModel **out);

// Releases a model handle. NULL is ignored.
//
// # Safety
// `m` must be NULL or a handle not yet freed.
void hrn_model_free(struct HrnModel *m);

// Number of input frames the model consumes, or 0 for NULL.
//
// # Safety
// `m` must be NULL or a live handle.
size_t hrn_model_history(const struct HrnModel *m);

// Predicts the leaf positions following frame `frame` of `t` into `buf`
// (`n_particles * 3` doubles).
//
// # Safety
// Handles must be live and `buf` must hold `len` doubles.
enum HrnStatus hrn_model_step(const struct HrnModel *m,
                              const struct HrnTrajectory *t,
                              size_t frame,
                              double *buf,
                              size_t len);

// Autoregressive rollout of `n_steps` from frame `start`. The result holds
// the seed frames followed by the predictions.
//
// # Safety
// Handles must be live and `out` a valid pointer.
enum HrnStatus hrn_rollout(const struct HrnModel *m,
                           const struct HrnTrajectory *t,
                           size_t start,
                           size_t n_steps,
                           struct HrnTrajectory **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HRN_H */

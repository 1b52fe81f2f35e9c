#ifndef MENTOR_H
#define MENTOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MentorStatus {
  MENTOR_STATUS_OK = 0,
  MENTOR_STATUS_NULL_POINTER = 1,
  MENTOR_STATUS_INVALID_ARGUMENT = 2,
  MENTOR_STATUS_CONFIG = 3,
  MENTOR_STATUS_IO = 4,
  MENTOR_STATUS_CORRUPT = 5,
  MENTOR_STATUS_VERSION = 6,
  MENTOR_STATUS_NUMERIC = 7,
  MENTOR_STATUS_INVALID_UTF8 = 8,
  MENTOR_STATUS_PANIC = 9,
} MentorStatus;

// Opaque trainer handle.
typedef struct MentorTrainer MentorTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mentor_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length in
// bytes, excluding the terminator. `buf` may be null to query the length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t mentor_last_error_message(char *buf, uintptr_t len);

// Creates a trainer from a TOML configuration; null means defaults.
//
// # Safety
// `config_toml` must be null or a valid C string; `out` must be writable.
enum MentorStatus mentor_trainer_new(const char *config_toml, struct MentorTrainer **out);

// Loads a trainer from a checkpoint file.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum MentorStatus mentor_trainer_load(const char *path, struct MentorTrainer **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `t` must be null or a handle not yet freed.
void mentor_trainer_free(struct MentorTrainer *t);

// Writes a checkpoint.
//
// # Safety
// `t` must be a live handle and `path` a valid C string.
enum MentorStatus mentor_trainer_save(struct MentorTrainer *t, const char *path);

// Runs `n` training episodes. `env_successes`, when not null, receives the
// number of those episodes that touched the environment goal.
//
// # Safety
// `t` must be a live handle; `env_successes` null or writable.
enum MentorStatus mentor_trainer_run_episodes(struct MentorTrainer *t,
                                              uint32_t n,
                                              uint32_t *env_successes);

// Number of completed training episodes.
//
// # Safety
// `t` must be a live handle and `out` writable.
enum MentorStatus mentor_trainer_episode(struct MentorTrainer *t, uint64_t *out);

// Greedy success rate over `episodes` evaluation rollouts.
//
// # Safety
// `t` must be a live handle and `out` writable.
enum MentorStatus mentor_trainer_evaluate(struct MentorTrainer *t, uint32_t episodes, double *out);

// Current constraint range `k` and multiplier `α`. Either pointer may be null.
//
// # Safety
// `t` must be a live handle; outputs null or writable.
enum MentorStatus mentor_trainer_curriculum(struct MentorTrainer *t, double *k, double *alpha);

// Writes the greedy subgoal for state `s` and goal `g` into `out`.
// Lengths must match the environment's state and goal dimensions.
//
// # Safety
// `t` must be a live handle; `s`, `g` readable and `out` writable for
// their stated lengths.
enum MentorStatus mentor_trainer_subgoal(struct MentorTrainer *t,
                                         const double *s,
                                         uintptr_t s_len,
                                         const double *g,
                                         uintptr_t g_len,
                                         double *out,
                                         uintptr_t out_len);

// Sparse goal test: `*hit` is 1 when `‖achieved − goal‖ < epsilon`, else 0.
//
// # Safety
// `achieved` and `goal` must be readable for `dim` values; `hit` writable.
enum MentorStatus mentor_goal_reward(const double *achieved,
                                     const double *goal,
                                     uintptr_t dim,
                                     double epsilon,
                                     int32_t *hit);

// Scripted four-rooms preference score of position `(x, y)`.
double mentor_four_rooms_oracle(double x, double y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MENTOR_H */

#ifndef PROTIP_H
#define PROTIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The numeric values match the exit codes of the `protip`
// command where both exist.
typedef enum ProtipStatus {
  PROTIP_STATUS_OK = 0,
  PROTIP_STATUS_INVALID_ARGUMENT = 1,
  PROTIP_STATUS_NO_CONSENSUS = 2,
  PROTIP_STATUS_INSUFFICIENT_MATCHES = 3,
  PROTIP_STATUS_FORMAT = 4,
  PROTIP_STATUS_COVERAGE = 5,
  PROTIP_STATUS_DEGENERATE = 6,
  PROTIP_STATUS_IO = 7,
  PROTIP_STATUS_NULL_POINTER = 8,
  PROTIP_STATUS_PANIC = 9,
  PROTIP_STATUS_OTHER = 10,
} ProtipStatus;

// Pipeline settings.
typedef struct ProtipConfig ProtipConfig;

// Result of one calibration run.
typedef struct ProtipRun ProtipRun;

// A sweep loaded from a directory.
typedef struct ProtipSweep ProtipSweep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on the calling thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *protip_last_error(void);

// Library version as a static NUL-terminated string.
const char *protip_version(void);

// Loads a sweep directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum ProtipStatus protip_sweep_load(const char *dir, struct ProtipSweep **out);

// Number of frames in a sweep; 0 for a null handle.
//
// # Safety
// `sweep` must be null or a handle from [`protip_sweep_load`].
size_t protip_sweep_frame_count(const struct ProtipSweep *sweep);

// # Safety
// `sweep` must be null or a handle from [`protip_sweep_load`] not yet freed.
void protip_sweep_free(struct ProtipSweep *sweep);

// Default pipeline settings.
struct ProtipConfig *protip_config_new(void);

// Sets one setting by its configuration-file key, e.g. `seg` or
// `translation_steps`. Consistency between settings is checked by
// [`protip_calibrate`].
//
// # Safety
// `config` must be a handle from [`protip_config_new`]; `key` and `value`
// NUL-terminated strings.
enum ProtipStatus protip_config_set(struct ProtipConfig *config,
                                    const char *key,
                                    const char *value);

// # Safety
// `config` must be null or a handle from [`protip_config_new`] not yet freed.
void protip_config_free(struct ProtipConfig *config);

// Runs the full pipeline on two sweeps. A null `config` uses the defaults.
//
// # Safety
// `a` and `b` must be sweep handles, `config` null or a config handle and
// `out` a valid pointer.
enum ProtipStatus protip_calibrate(const struct ProtipSweep *a,
                                   const struct ProtipSweep *b,
                                   const struct ProtipConfig *config,
                                   struct ProtipRun **out);

// Final calibration (refined when refinement ran) into `out[16]`.
//
// # Safety
// `run` must be a run handle and `out` point to 16 doubles.
enum ProtipStatus protip_run_calibration(const struct ProtipRun *run, double *out);

// Calibration before refinement into `out[16]`.
//
// # Safety
// `run` must be a run handle and `out` point to 16 doubles.
enum ProtipStatus protip_run_initial_calibration(const struct ProtipRun *run, double *out);

// Number of tip matches, and of RANSAC inliers among them.
//
// # Safety
// `run` must be a run handle; `matches` and `inliers` valid pointers.
enum ProtipStatus protip_run_match_counts(const struct ProtipRun *run,
                                          size_t *matches,
                                          size_t *inliers);

// # Safety
// `run` must be null or a handle from [`protip_calibrate`] not yet freed.
void protip_run_free(struct ProtipRun *run);

// Least-squares calibration from `n` correspondences. `poses_*` hold `n`
// row-major 4×4 tracking matrices, `points_*` hold `n` (x, y) image points
// in mm. The result is written to `out[16]`.
//
// # Safety
// All arrays must have the stated lengths.
enum ProtipStatus protip_solve(const double *poses_a,
                               const double *points_a,
                               const double *poses_b,
                               const double *points_b,
                               size_t n,
                               double *out);

// RANSAC calibration from `n` correspondences with default thresholds and
// the given seed. Arrays as in [`protip_solve`]; `inlier_flags`, when not
// null, receives `n` bytes set to 1 for inliers.
//
// # Safety
// All arrays must have the stated lengths.
enum ProtipStatus protip_ransac(const double *poses_a,
                                const double *points_a,
                                const double *poses_b,
                                const double *points_b,
                                size_t n,
                                uint64_t seed,
                                double *out,
                                uint8_t *inlier_flags);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTIP_H */

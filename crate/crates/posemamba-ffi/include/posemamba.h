#ifndef POSEMAMBA_H
#define POSEMAMBA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  PM_STATUS_INVALID_UTF8 = 2,
  PM_STATUS_BUFFER_TOO_SMALL = 3,
  PM_STATUS_DIMENSION = 10,
  PM_STATUS_PARAMETER = 11,
  PM_STATUS_CONFIG = 12,
  PM_STATUS_STRUCTURE = 13,
  PM_STATUS_NON_FINITE = 14,
  PM_STATUS_DEGENERATE_INPUT = 15,
  PM_STATUS_ALIGNMENT = 16,
  PM_STATUS_PARSE = 17,
  PM_STATUS_VALIDATION = 18,
  PM_STATUS_CHECKPOINT = 19,
  PM_STATUS_IO = 20,
  PM_STATUS_PANIC = 99,
} PmStatus;

// Opaque model handle.
typedef struct PmModel PmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pm_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL.
size_t pm_last_error_message(char *buf, size_t len);

// Loads a checkpoint file. `precision` is 32 or 64, or 0 for the precision
// stored in the checkpoint.
PmStatus pm_model_load(const char *path, uint32_t precision, PmModel **out);

// Creates a freshly initialised model on the H36M skeleton from a TOML
// model configuration (same keys as the `[model]` table of a training
// config).
PmStatus pm_model_init(const char *config_toml, uint64_t seed, PmModel **out);

// Writes the model to a checkpoint file.
PmStatus pm_model_save(const PmModel *model, const char *path);

// Releases a handle. Null is ignored.
void pm_model_free(PmModel *model);

// Window length T of the model, or 0 for a null handle.
size_t pm_model_frames(const PmModel *model);

// Joint count J of the model, or 0 for a null handle.
size_t pm_model_joints(const PmModel *model);

// Trainable parameter count, or 0 for a null handle.
size_t pm_model_parameter_count(const PmModel *model);

// Lifts `frames × joints × 2` normalised keypoints (row-major) of a
// sequence of any length to `frames × joints × 3` millimetres written to
// `out` (capacity `out_len`). A non-zero `flip` averages with the mirrored
// prediction.
PmStatus pm_model_predict(const PmModel *model,
                          const double *keypoints,
                          size_t frames,
                          size_t joints,
                          int flip,
                          double *out,
                          size_t out_len);

// Root-aligned mean per-joint position error of two `frames × joints × 3`
// sequences.
PmStatus pm_mpjpe(const double *pred, const double *gt, size_t frames, size_t joints, double *out);

// Mean per-joint error after per-frame similarity alignment. Frames with a
// degenerate (collinear) pose are skipped and counted in `skipped`
// (may be null).
PmStatus pm_p_mpjpe(const double *pred,
                    const double *gt,
                    size_t frames,
                    size_t joints,
                    double *out,
                    size_t *skipped);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEMAMBA_H */

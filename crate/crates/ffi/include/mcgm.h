#ifndef MCGM_H
#define MCGM_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum McgmStatus {
  MCGM_STATUS_OK = 0,
  MCGM_STATUS_NULL_POINTER = 1,
  // Bad sizes, element out of range, invalid geometry.
  MCGM_STATUS_INVALID_ARGUMENT = 2,
  // File missing or unreadable.
  MCGM_STATUS_IO = 3,
  // File readable but malformed (checkpoint, JSON).
  MCGM_STATUS_BAD_INPUT = 4,
  // Non-finite values in a computation.
  MCGM_STATUS_NUMERIC = 5,
  // Output buffer too small.
  MCGM_STATUS_BUFFER_TOO_SMALL = 6,
  // A bug inside the library; the handle should not be reused.
  MCGM_STATUS_INTERNAL = 7,
} McgmStatus;

// A loaded checkpoint together with the clustering settings it was trained with.
typedef struct McgmModel McgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mcgm_version(void);

// Message of the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on this thread.
const char *mcgm_last_error_message(void);

// Loads a checkpoint written by `mcgm train`. On success `*out` receives a
// new handle owned by the caller.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum McgmStatus mcgm_model_load(const char *path, struct McgmModel **out);

// Releases a handle from [`mcgm_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void mcgm_model_free(struct McgmModel *model);

// Largest atomic number the model accepts, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t mcgm_model_max_z(const struct McgmModel *model);

// 1 if the model carries the cluster module, 0 if it is a plain backbone
// (or the handle is null).
//
// # Safety
// `model` must be null or a live handle.
int mcgm_model_uses_clusters(const struct McgmModel *model);

// Predicts the energy (meV) of one molecule and optionally its forces
// (meV/Å). `z` holds `n_atoms` atomic numbers, `positions` and
// `forces_out` hold `3 * n_atoms` row-major coordinates in Å. Pass null
// for `forces_out` to skip forces.
//
// # Safety
// Pointers must be valid for the stated lengths; `model` must be live.
enum McgmStatus mcgm_predict(const struct McgmModel *model,
                             size_t n_atoms,
                             const uint32_t *z,
                             const double *positions,
                             double *energy_out,
                             double *forces_out);

// Cluster counts per hierarchy level for one molecule, as the model would
// build them at inference. Writes at most `capacity` values to `sizes_out`
// and the number of levels to `*n_levels_out`; if that exceeds `capacity`
// the call fails with `BufferTooSmall` after setting `*n_levels_out`.
//
// # Safety
// Pointers must be valid for the stated lengths; `model` must be live.
enum McgmStatus mcgm_cluster_sizes(const struct McgmModel *model,
                                   size_t n_atoms,
                                   const uint32_t *z,
                                   const double *positions,
                                   size_t *sizes_out,
                                   size_t capacity,
                                   size_t *n_levels_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCGM_H */

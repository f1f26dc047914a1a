#ifndef DIFFGO_H
#define DIFFGO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DgStatus {
  DG_STATUS_OK = 0,
  DG_STATUS_NULL_POINTER = 1,
  DG_STATUS_INVALID_ARGUMENT = 2,
  DG_STATUS_BUFFER_TOO_SMALL = 3,
  DG_STATUS_BASIS_MISMATCH = 4,
  DG_STATUS_CORRUPT_MESSAGE = 5,
  DG_STATUS_MALFORMED_MESSAGE = 6,
  DG_STATUS_UNSUPPORTED_FORMAT = 7,
  DG_STATUS_NUMERICAL = 8,
  DG_STATUS_CHECKPOINT = 9,
  DG_STATUS_IO = 10,
  DG_STATUS_PANIC = 11,
} DgStatus;

/**
 * Shared seed basis.
 */
typedef struct DgBasis DgBasis;

/**
 * Decoded wire message.
 */
typedef struct DgMessage DgMessage;

/**
 * Trained noise predictor.
 */
typedef struct DgModel DgModel;

/**
 * Linear beta schedule parameters.
 */
typedef struct DgSchedule {
  size_t steps;
  double beta_start;
  double beta_end;
} DgSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *dg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dg_version(void);

/**
 * Default linear schedule.
 */
struct DgSchedule dg_schedule_default(void);

/**
 * Writes `count` standard normals for `seed` into `out`.
 *
 * # Safety
 * `out` must point to `count` writable floats.
 */
enum DgStatus dg_gaussian_stream(uint64_t seed, float *out, size_t count);

/**
 * Builds a basis from `n` distinct seeds.
 *
 * # Safety
 * `seeds` must point to `n` values; `out` must be writable.
 */
enum DgStatus dg_basis_new(const uint64_t *seeds, size_t n, size_t dim, struct DgBasis **out);

/**
 * # Safety
 * `basis` must come from [`dg_basis_new`] and not be used afterwards.
 */
void dg_basis_free(struct DgBasis *basis);

/**
 * # Safety
 * `basis` must be a live handle.
 */
enum DgStatus dg_basis_fingerprint(const struct DgBasis *basis, uint64_t *out);

/**
 * Number of basis vectors and their dimension.
 *
 * # Safety
 * `basis` must be a live handle; outputs must be writable.
 */
enum DgStatus dg_basis_shape(const struct DgBasis *basis, size_t *n, size_t *dim);

/**
 * Least-squares weights of `x` (length `dim`) into `out` (length `n`).
 * `use_gd` selects gradient descent over the normal equations.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum DgStatus dg_project(const struct DgBasis *basis,
                         const float *x,
                         size_t x_len,
                         bool use_gd,
                         float *out,
                         size_t out_len);

/**
 * `sum_i values[i] * N_{indices[i]}` into `out` (length `dim`). Indices
 * must be strictly increasing.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum DgStatus dg_reconstruct(const struct DgBasis *basis,
                             const uint32_t *indices,
                             const float *values,
                             size_t k,
                             float *out,
                             size_t out_len);

/**
 * Loads a model checkpoint from memory.
 *
 * # Safety
 * `bytes` must point to `len` bytes; `out` must be writable.
 */
enum DgStatus dg_model_from_bytes(const uint8_t *bytes, size_t len, struct DgModel **out);

/**
 * Loads a model checkpoint from a file path.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DgStatus dg_model_load(const char *path, struct DgModel **out);

/**
 * # Safety
 * `model` must come from a `dg_model_*` constructor and not be used afterwards.
 */
void dg_model_free(struct DgModel *model);

/**
 * Decodes one wire message.
 *
 * # Safety
 * `bytes` must point to `len` bytes; `out` must be writable.
 */
enum DgStatus dg_message_decode(const uint8_t *bytes, size_t len, struct DgMessage **out);

/**
 * Re-encodes a message. With `out` null, only `written` is set to the
 * required size.
 *
 * # Safety
 * `message` must be a live handle; `out` valid for `cap` bytes or null.
 */
enum DgStatus dg_message_encode(const struct DgMessage *message,
                                uint8_t *out,
                                size_t cap,
                                size_t *written);

/**
 * Basis fingerprint, nonzero weight count and image size of a message.
 *
 * # Safety
 * `message` must be a live handle; outputs must be writable or null.
 */
enum DgStatus dg_message_info(const struct DgMessage *message,
                              uint64_t *fingerprint,
                              size_t *k_used,
                              size_t *pixels);

/**
 * # Safety
 * `message` must come from [`dg_message_decode`] and not be used afterwards.
 */
void dg_message_free(struct DgMessage *message);

/**
 * Regenerates the transmitter's image from a decoded message into `out`.
 *
 * # Safety
 * Handles must be live; `out` must be valid for `out_len` floats.
 */
enum DgStatus dg_receive(const struct DgMessage *message,
                         const struct DgModel *model,
                         const struct DgBasis *basis,
                         struct DgSchedule schedule,
                         float *out,
                         size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFGO_H */

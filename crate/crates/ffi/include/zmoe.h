#ifndef ZMOE_H
#define ZMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum ZmoeStatus {
  ZMOE_STATUS_OK = 0,
  ZMOE_STATUS_INVALID_ARGUMENT = 1,
  ZMOE_STATUS_NOT_FOUND = 2,
  ZMOE_STATUS_CORRUPTION = 3,
  ZMOE_STATUS_CONVERGENCE = 4,
  ZMOE_STATUS_IO = 5,
  ZMOE_STATUS_BUFFER_TOO_SMALL = 6,
  ZMOE_STATUS_NULL_POINTER = 7,
  ZMOE_STATUS_INTERNAL = 8,
} ZmoeStatus;

// Opaque handle to an open container.
typedef struct ZmoeContainer ZmoeContainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *zmoe_last_error(void);

// Opens a container file and stores a new handle in `out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum ZmoeStatus zmoe_container_open(const char *path, struct ZmoeContainer **out);

// Releases a handle from [`zmoe_container_open`]. Null is ignored.
//
// # Safety
// `handle` must come from `zmoe_container_open` and not be used afterwards.
void zmoe_container_close(struct ZmoeContainer *handle);

// Exponent shards per tensor and tensors per expert.
//
// # Safety
// `handle` must be a live handle; outputs must be valid pointers.
enum ZmoeStatus zmoe_container_shape(const struct ZmoeContainer *handle,
                                     uintptr_t *k,
                                     uintptr_t *tensors_per_expert);

// Element count of one tensor.
//
// # Safety
// `handle` must be a live handle and `len` a valid pointer.
enum ZmoeStatus zmoe_container_tensor_len(const struct ZmoeContainer *handle,
                                          uint32_t layer,
                                          uint32_t expert_id,
                                          uint16_t tensor_index,
                                          uintptr_t *len);

// Reads, verifies and reconstructs one tensor into `out` (BF16 words).
//
// # Safety
// `handle` must be a live handle and `out` must hold `capacity` words.
enum ZmoeStatus zmoe_container_reconstruct(const struct ZmoeContainer *handle,
                                           uint32_t layer,
                                           uint32_t expert_id,
                                           uint16_t tensor_index,
                                           uint16_t *out,
                                           uintptr_t capacity);

// Splits `len` BF16 words into sign+mantissa bytes and exponent bytes, each
// `len` long. `k` only validates the shard count; the exponent output is the
// concatenation of the shards.
//
// # Safety
// `words`, `sm` and `exponents` must each hold `len` elements.
enum ZmoeStatus zmoe_decompose(const uint16_t *words,
                               uintptr_t len,
                               uintptr_t k,
                               uint8_t *sm,
                               uint8_t *exponents);

// Inverse of [`zmoe_decompose`].
//
// # Safety
// `sm`, `exponents` and `words` must each hold `len` elements.
enum ZmoeStatus zmoe_recompose(const uint8_t *sm,
                               const uint8_t *exponents,
                               uintptr_t len,
                               uint16_t *words);

// Order-0 Shannon entropy of a byte string in bits per byte.
//
// # Safety
// `bytes` must hold `len` bytes and `bits` must be valid.
enum ZmoeStatus zmoe_entropy(const uint8_t *bytes, uintptr_t len, double *bits);

// Distribution of the number of successes among independent events with
// probabilities `q`; writes `n + 1` entries to `out`.
//
// # Safety
// `q` must hold `n` values and `out` must hold `capacity` values.
enum ZmoeStatus zmoe_hit_distribution(const double *q,
                                      uintptr_t n,
                                      double *out,
                                      uintptr_t capacity);

// Fits per-expert selection probabilities whose conditional-Poisson
// inclusion probabilities match the rank marginals `f` (summing to `k`).
// Writes `n` values to `q` and the iteration count to `iterations`.
//
// # Safety
// `f` and `q` must hold `n` values; `iterations` may be null.
enum ZmoeStatus zmoe_fit_selection(const double *f,
                                   uintptr_t n,
                                   uintptr_t k,
                                   double tol,
                                   uintptr_t max_iter,
                                   double *q,
                                   uintptr_t *iterations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZMOE_H */

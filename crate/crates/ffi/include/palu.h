#ifndef PALU_H
#define PALU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum PaluStatus {
  PALU_STATUS_OK = 0,
  // Bad argument, shape or configuration.
  PALU_STATUS_VALIDATION = 1,
  // SVD non-convergence, non-positive-definite Gram matrix, NaN/Inf.
  PALU_STATUS_NUMERICAL = 2,
  // A required pointer was null.
  PALU_STATUS_NULL = 4,
  PALU_STATUS_IO = 5,
  // A Rust panic was caught; the library state is still usable.
  PALU_STATUS_PANIC = 6,
} PaluStatus;

// Decomposition granularity: one factor pair per head, per group of
// `group_size` heads, or one for all heads.
typedef enum PaluGranularity {
  PALU_GRANULARITY_MULTI_HEAD = 0,
  PALU_GRANULARITY_GROUP_HEAD = 1,
  PALU_GRANULARITY_JOINT_HEAD = 2,
} PaluGranularity;

typedef struct PaluDecomposed PaluDecomposed;

typedef struct PaluMatrix PaluMatrix;

typedef struct PaluQuantized PaluQuantized;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next `palu_*` call on the same thread.
const char *palu_last_error(void);

// Library version, static storage.
const char *palu_version(void);

// Copies `rows * cols` row-major values into a new matrix.
//
// # Safety
// `data` must point to `rows * cols` doubles; `out` must be writable.
enum PaluStatus palu_matrix_new(size_t rows,
                                size_t cols,
                                const double *data,
                                struct PaluMatrix **out);

// Seeded random matrix. With `spectrum` in (0, 1] its singular values are
// `1, γ, γ², …`; with `spectrum <= 0` entries are standard normal.
//
// # Safety
// `out` must be writable.
enum PaluStatus palu_matrix_random(size_t rows,
                                   size_t cols,
                                   uint64_t seed,
                                   double spectrum,
                                   struct PaluMatrix **out);

// # Safety
// `m` must come from a `palu_*` constructor and not be freed twice.
void palu_matrix_free(struct PaluMatrix *m);

// Row count; 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t palu_matrix_rows(const struct PaluMatrix *m);

// Column count; 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t palu_matrix_cols(const struct PaluMatrix *m);

// Row-major copy of the entries.
//
// # Safety
// `buf` must hold `cap` doubles; `len` must be writable.
enum PaluStatus palu_matrix_copy(const struct PaluMatrix *m, double *buf, size_t cap, size_t *len);

// Singular values in non-increasing order (`min(rows, cols)` of them).
//
// # Safety
// `buf` must hold `cap` doubles; `len` must be writable.
enum PaluStatus palu_svd_singular_values(const struct PaluMatrix *m,
                                         double *buf,
                                         size_t cap,
                                         size_t *len);

// Truncated-SVD factorization of a `d_model × (n_heads·head_dim)`
// projection, one rank per group (`n_heads / group_size` of them; 1 for
// joint, `n_heads` for multi-head). `group_size` is read only for
// `GroupHead`.
//
// # Safety
// `ranks` must point to `n_ranks` values; `out` must be writable.
enum PaluStatus palu_decompose(const struct PaluMatrix *w,
                               size_t n_heads,
                               size_t head_dim,
                               enum PaluGranularity granularity,
                               size_t group_size,
                               const size_t *ranks,
                               size_t n_ranks,
                               struct PaluDecomposed **out);

// # Safety
// `d` must come from a `palu_*` constructor and not be freed twice.
void palu_decomposed_free(struct PaluDecomposed *d);

// Per-group ranks.
//
// # Safety
// `buf` must hold `cap` values; `len` must be writable.
enum PaluStatus palu_decomposed_ranks(const struct PaluDecomposed *d,
                                      size_t *buf,
                                      size_t cap,
                                      size_t *len);

// Dense `A·B` of every group, concatenated into the full projection.
//
// # Safety
// `out` must be writable.
enum PaluStatus palu_reconstruct(const struct PaluDecomposed *d, struct PaluMatrix **out);

// `‖W − reconstruct(d)‖_F`.
//
// # Safety
// `error` must be writable.
enum PaluStatus palu_frobenius_error(const struct PaluDecomposed *d,
                                     const struct PaluMatrix *w,
                                     double *error);

// Folds a Hadamard rotation into every factor pair; the product `A·B` is
// unchanged.
//
// # Safety
// `out` must be writable.
enum PaluStatus palu_fuse_hadamard(const struct PaluDecomposed *d, struct PaluDecomposed **out);

// Per-row asymmetric quantization at 2, 3, 4 or 8 bits.
//
// # Safety
// `out` must be writable.
enum PaluStatus palu_quantize(const struct PaluMatrix *m, uint8_t bits, struct PaluQuantized **out);

// # Safety
// `q` must come from `palu_quantize` and not be freed twice.
void palu_quantized_free(struct PaluQuantized *q);

// # Safety
// `out` must be writable.
enum PaluStatus palu_dequantize(const struct PaluQuantized *q, struct PaluMatrix **out);

// Unpacked codes, one byte each, row-major.
//
// # Safety
// `buf` must hold `cap` bytes; `len` must be writable.
enum PaluStatus palu_quantized_codes(const struct PaluQuantized *q,
                                     uint8_t *buf,
                                     size_t cap,
                                     size_t *len);

// Per-row scales.
//
// # Safety
// `buf` must hold `cap` doubles; `len` must be writable.
enum PaluStatus palu_quantized_scales(const struct PaluQuantized *q,
                                      double *buf,
                                      size_t cap,
                                      size_t *len);

// `(m·r + r·n) / (m·n)`: factor storage relative to the dense matrix.
double palu_weight_ratio(double m, double n, double r);

// KV-cache bytes for a named preset (e.g. "llama2-7b") at `tokens` tokens,
// under a uniform group-head plan keeping `budget_rate` of the width and
// caching latents at `bits` bits. `compressed` excludes metadata.
//
// # Safety
// `preset` must be a NUL-terminated string; outputs must be writable.
enum PaluStatus palu_kv_cache_bytes(const char *preset,
                                    uint64_t tokens,
                                    size_t group_size,
                                    double budget_rate,
                                    uint32_t bits,
                                    uint64_t *baseline,
                                    uint64_t *compressed);

// Splits `round(budget_rate · Σ widths)` ranks across `n` targets in
// proportion to `scores`. Targets are identified by index; ties go to the
// lower index. `block` > 0 rounds each rank down to a multiple of it.
//
// # Safety
// `scores`, `widths` and `ranks_out` must each hold `n` elements.
enum PaluStatus palu_allocate(const double *scores,
                              const size_t *widths,
                              size_t n,
                              size_t d_model,
                              double budget_rate,
                              size_t min_rank,
                              size_t block,
                              size_t *ranks_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PALU_H */

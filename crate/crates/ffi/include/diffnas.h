#ifndef DIFFNAS_H
#define DIFFNAS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiffnasStatus {
  DIFFNAS_STATUS_OK = 0,
  DIFFNAS_STATUS_NULL_POINTER = 1,
  DIFFNAS_STATUS_INVALID_ARGUMENT = 2,
  DIFFNAS_STATUS_PARSE_ERROR = 3,
  DIFFNAS_STATUS_RANGE_VIOLATION = 4,
  /**
   * A numerical routine failed (degenerate input, non-PSD covariance, ...).
   */
  DIFFNAS_STATUS_COMPUTE_ERROR = 5,
  DIFFNAS_STATUS_IO_ERROR = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  DIFFNAS_STATUS_PANIC = 7,
} DiffnasStatus;

/**
 * Values accepted by the `scale` parameters.
 */
typedef enum DiffnasScale {
  DIFFNAS_SCALE_DESK = 0,
  DIFFNAS_SCALE_CIFAR = 1,
} DiffnasScale;

/**
 * A parsed, validated architecture.
 */
typedef struct DiffnasArch DiffnasArch;

/**
 * A search memory loaded from a JSONL log.
 */
typedef struct DiffnasMemory DiffnasMemory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *diffnas_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *diffnas_version(void);

/**
 * Parses `text` (compact `base_channel=..,num_blocks=..,mult=a:b:c:d,attn=a:b:c:d`
 * form or a key-value block) into a new handle.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be writable.
 */
enum DiffnasStatus diffnas_arch_parse(const char *text, struct DiffnasArch **out);

/**
 * # Safety
 * `arch` must come from [`diffnas_arch_parse`] and not be used afterwards. NULL is ignored.
 */
void diffnas_arch_free(struct DiffnasArch *arch);

/**
 * Writes the compact form of `arch` into `buf` (NUL-terminated). `needed`
 * receives the full length including the terminator, so a call with
 * `buf_len = 0` queries the size.
 *
 * # Safety
 * `arch` must be a live handle; `buf` must hold `buf_len` bytes; `needed` must be writable.
 */
enum DiffnasStatus diffnas_arch_to_string(const struct DiffnasArch *arch,
                                          char *buf,
                                          size_t buf_len,
                                          size_t *needed);

/**
 * Multiply-accumulate estimate of `arch`. `scale` is a [`DiffnasScale`];
 * `length` is the desk signal length and is ignored by the CIFAR estimator.
 *
 * # Safety
 * `arch` must be a live handle; `out` must be writable.
 */
enum DiffnasStatus diffnas_arch_flops(const struct DiffnasArch *arch,
                                      uint32_t scale,
                                      size_t length,
                                      uint64_t *out);

/**
 * # Safety
 * `x` and `y` must each hold `n` doubles; `out` must be writable.
 */
enum DiffnasStatus diffnas_pearson(const double *x, const double *y, size_t n, double *out);

/**
 * # Safety
 * `x` and `y` must each hold `n` doubles; `out` must be writable.
 */
enum DiffnasStatus diffnas_spearman(const double *x, const double *y, size_t n, double *out);

/**
 * # Safety
 * `x` and `y` must each hold `n` doubles; `out` must be writable.
 */
enum DiffnasStatus diffnas_kendall(const double *x, const double *y, size_t n, double *out);

/**
 * Fréchet distance between Gaussian fits of two row-major sample sets of
 * dimension `dim` (`n_a` and `n_b` rows).
 *
 * # Safety
 * `a` must hold `n_a * dim` doubles, `b` `n_b * dim`; `out` must be writable.
 */
enum DiffnasStatus diffnas_fid(const double *a,
                               size_t n_a,
                               const double *b,
                               size_t n_b,
                               size_t dim,
                               double *out);

/**
 * Loads a JSONL memory log. `scale` is a [`DiffnasScale`].
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum DiffnasStatus diffnas_memory_load(const char *path,
                                       uint64_t budget,
                                       uint32_t scale,
                                       struct DiffnasMemory **out);

/**
 * # Safety
 * `memory` must come from [`diffnas_memory_load`] and not be used afterwards. NULL is ignored.
 */
void diffnas_memory_free(struct DiffnasMemory *memory);

/**
 * Number of records in the log.
 *
 * # Safety
 * `memory` must be a live handle; `out` must be writable.
 */
enum DiffnasStatus diffnas_memory_len(const struct DiffnasMemory *memory, size_t *out);

/**
 * The selected record: its architecture as a new handle, plus its RFID and
 * FLOPs. Fails with `DIFFNAS_STATUS_COMPUTE_ERROR` when nothing was accepted.
 *
 * # Safety
 * `memory` must be a live handle; all out pointers must be writable.
 */
enum DiffnasStatus diffnas_memory_best(const struct DiffnasMemory *memory,
                                       struct DiffnasArch **arch,
                                       double *rfid,
                                       uint64_t *flops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFNAS_H */

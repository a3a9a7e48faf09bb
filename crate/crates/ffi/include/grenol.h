#ifndef GRENOL_H
#define GRENOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped whenever a signature or struct layout in this header changes.
 */
#define GRENOL_ABI_VERSION 1

/**
 * `mode` values accepted by [`grenol_schedule_new`].
 */
#define GRENOL_MODE_PAPER 0

#define GRENOL_MODE_STANDARD 1

typedef enum GrenolStatus {
  GRENOL_STATUS_OK = 0,
  GRENOL_STATUS_NULL_POINTER = 1,
  GRENOL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable, malformed or inconsistent input data or files.
   */
  GRENOL_STATUS_DATA = 3,
  GRENOL_STATUS_NUMERIC = 4,
  GRENOL_STATUS_PANIC = 5,
} GrenolStatus;

/**
 * A loaded checkpoint ready for sampling.
 */
typedef struct GrenolModel GrenolModel;

typedef struct GrenolSchedule GrenolSchedule;

/**
 * One row of a noise schedule.
 */
typedef struct GrenolScheduleRow {
  size_t t;
  double beta;
  double alpha;
  double alpha_bar;
  double sigma;
} GrenolScheduleRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t grenol_abi_version(void);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes, into `buf`. Returns the size needed for the
 * full message including the NUL, or 0 when there is no error. `buf` may be
 * null to query the size.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t grenol_last_error_message(char *buf, size_t len);

/**
 * Builds the `n × n` morphological adjacency of `nodes` into `out`
 * (row-major, `n * n` doubles).
 *
 * # Safety
 * `nodes` must hold `n` doubles and `out` must have room for `n * n`.
 */
enum GrenolStatus grenol_pairing_edges(const double *nodes, size_t n, double *out);

/**
 * Element-wise MSE and Frobenius distance between two `n × n` matrices.
 *
 * # Safety
 * `a` and `b` must each hold `n * n` doubles; `mse` and `frobenius` must be
 * valid for one write.
 */
enum GrenolStatus grenol_graph_distance(const double *a,
                                        const double *b,
                                        size_t n,
                                        double *mse,
                                        double *frobenius);

/**
 * Cosine schedule with `steps` steps and noise scale `k`. `mode` is
 * `GRENOL_MODE_PAPER` or `GRENOL_MODE_STANDARD`.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum GrenolStatus grenol_schedule_new(size_t steps,
                                      double k,
                                      uint32_t mode,
                                      struct GrenolSchedule **out);

/**
 * # Safety
 * `schedule` must be null or a handle from [`grenol_schedule_new`] that has
 * not been freed.
 */
void grenol_schedule_free(struct GrenolSchedule *schedule);

/**
 * Number of steps `T`; 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
size_t grenol_schedule_len(const struct GrenolSchedule *schedule);

/**
 * Coefficients of step `t` in `1..=T`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` valid for one write.
 */
enum GrenolStatus grenol_schedule_values(const struct GrenolSchedule *schedule,
                                         size_t t,
                                         struct GrenolScheduleRow *out);

/**
 * Loads a checkpoint written by `grenol train`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` valid for one
 * pointer write.
 */
enum GrenolStatus grenol_model_load(const char *path, struct GrenolModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`grenol_model_load`] that has not
 * been freed.
 */
void grenol_model_free(struct GrenolModel *model);

/**
 * Nodes per graph expected by the model; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t grenol_model_node_count(const struct GrenolModel *model);

/**
 * Predicts a target graph from raw source measurements.
 *
 * `source` holds `n` raw source-metric values (`n` must equal the model's
 * node count). Writes `n` raw target values to `out_nodes` and the `n × n`
 * adjacency to `out_adjacency`. The result depends only on the model, the
 * inputs and `seed`, and matches `grenol sample --seed`.
 *
 * # Safety
 * `model` must be a live handle, `source` and `out_nodes` must hold `n`
 * doubles and `out_adjacency` must have room for `n * n`.
 */
enum GrenolStatus grenol_model_sample(const struct GrenolModel *model,
                                      const double *source,
                                      size_t n,
                                      uint64_t seed,
                                      double *out_nodes,
                                      double *out_adjacency);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRENOL_H */

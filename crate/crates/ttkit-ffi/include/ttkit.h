#ifndef TTKIT_H
#define TTKIT_H

/* Generated by cbindgen from ttkit-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every entry point.
typedef enum TtkStatus {
  TtkStatus_Ok = 0,
  TtkStatus_NullPointer = 1,
  TtkStatus_InvalidArgument = 2,
  TtkStatus_ParseError = 3,
  TtkStatus_InvalidTree = 4,
  TtkStatus_PackError = 5,
  TtkStatus_DecodeError = 6,
  TtkStatus_InternalError = 7,
} TtkStatus;

// Opaque flattened training batch.
typedef struct TtkBatch TtkBatch;

// Opaque prefix-shared trajectory tree.
typedef struct TtkTree TtkTree;

// Token counts of one tree and their ratio.
typedef struct TtkTreeStats {
  uint64_t tree_tokens;
  uint64_t linear_tokens;
  double redundancy_ratio;
} TtkTreeStats;

// pass@K decision for one curation sample.
typedef struct TtkPassAtK {
  double r_hat;
  bool retained;
} TtkPassAtK;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the current thread's last error message (NUL-terminated) into `buf`.
// Returns the full message length in bytes, excluding the terminator; when
// `buf` is null or too small the message is truncated to fit.
//
// # Safety
// `buf` must point to `cap` writable bytes, or be null.
uintptr_t ttk_last_error(char *buf, uintptr_t cap);

// Library version as a static NUL-terminated string.
const char *ttk_version(void);

// Parse one task record line (the line-delimited JSON format) and build its
// prefix-shared tree.
//
// # Safety
// `json` must point to `len` readable bytes; `out` must be a valid pointer.
enum TtkStatus ttk_tree_from_record_json(const uint8_t *json,
                                         uintptr_t len,
                                         bool strict,
                                         struct TtkTree **out);

// # Safety
// `tree` must come from this library and not have been freed.
void ttk_tree_free(struct TtkTree *tree);

// Token accounting for a tree.
//
// # Safety
// `tree` and `out` must be valid pointers.
enum TtkStatus ttk_tree_stats(const struct TtkTree *tree, struct TtkTreeStats *out);

// Number of structural violations in the tree (0 means valid).
//
// # Safety
// `tree` and `out` must be valid pointers.
enum TtkStatus ttk_tree_violations(const struct TtkTree *tree, uintptr_t *out);

// Flatten a tree into a packed batch.
//
// # Safety
// `tree` and `out` must be valid pointers.
enum TtkStatus ttk_batch_pack(const struct TtkTree *tree, uint8_t mode, struct TtkBatch **out);

// # Safety
// `batch` must come from this library and not have been freed.
void ttk_batch_free(struct TtkBatch *batch);

// Flattened length T of the batch.
//
// # Safety
// `batch` and `out` must be valid pointers.
enum TtkStatus ttk_batch_len(const struct TtkBatch *batch, uint64_t *out);

// Copy the token ids into `buf` (capacity `cap` entries; needs at least T).
//
// # Safety
// `batch` must be valid; `buf` must point to `cap` writable entries.
enum TtkStatus ttk_batch_token_ids(const struct TtkBatch *batch, uint32_t *buf, uintptr_t cap);

// Copy the per-token position ids into `buf`.
//
// # Safety
// `batch` must be valid; `buf` must point to `cap` writable entries.
enum TtkStatus ttk_batch_position_ids(const struct TtkBatch *batch, uint32_t *buf, uintptr_t cap);

// Copy the per-token loss weights into `buf`.
//
// # Safety
// `batch` must be valid; `buf` must point to `cap` writable entries.
enum TtkStatus ttk_batch_loss_weights(const struct TtkBatch *batch, double *buf, uintptr_t cap);

// Copy the per-token origins (0 prompt, 1 generated) into `buf`.
//
// # Safety
// `batch` must be valid; `buf` must point to `cap` writable entries.
enum TtkStatus ttk_batch_origins(const struct TtkBatch *batch, uint8_t *buf, uintptr_t cap);

// Whether flat token `i` may attend to flat token `j` under the tree mask.
//
// # Safety
// `batch` and `out` must be valid pointers.
enum TtkStatus ttk_batch_attends(const struct TtkBatch *batch, uint64_t i, uint64_t j, bool *out);

// Serialize the batch to canonical TTK1 bytes. The buffer is owned by the
// library; release it with [`ttk_bytes_free`].
//
// # Safety
// `batch`, `out`, and `out_len` must be valid pointers.
enum TtkStatus ttk_batch_to_bytes(const struct TtkBatch *batch, uint8_t **out, uintptr_t *out_len);

// Decode TTK1 bytes into a batch handle.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be valid.
enum TtkStatus ttk_batch_from_bytes(const uint8_t *bytes, uintptr_t len, struct TtkBatch **out);

// Free a byte buffer returned by [`ttk_batch_to_bytes`].
//
// # Safety
// `bytes` must be a buffer of exactly `len` bytes returned by this library,
// not yet freed.
void ttk_bytes_free(uint8_t *bytes, uintptr_t len);

// Group-relative advantages. `advantage_mode`: 0 mean/std normalized,
// 1 mean-only. Writes `len` values into `out`.
//
// # Safety
// `rewards` must point to `len` readable doubles and `out` to `len`
// writable doubles.
enum TtkStatus ttk_group_advantages(const double *rewards,
                                    uintptr_t len,
                                    uint8_t advantage_mode,
                                    double std_floor,
                                    double *out);

// pass@K band filter from a correct-count: retained iff 0 < correct < k.
//
// # Safety
// `out` must be a valid pointer.
enum TtkStatus ttk_pass_at_k(uint32_t correct, uint32_t k, struct TtkPassAtK *out);

// Mean of `k` seeded noisy draws of `true_lp` under zero-mean Gaussian
// noise with standard deviation `sigma`.
//
// # Safety
// `out` must be a valid pointer.
enum TtkStatus ttk_mcla_average(double true_lp,
                                double sigma,
                                uint32_t k,
                                uint64_t seed,
                                uint64_t trial,
                                double *out);

// Importance weight exp(rollout_lp - train_lp) with the shared log clamp.
//
// # Safety
// `out` must be a valid pointer.
enum TtkStatus ttk_importance_weight(double rollout_lp, double train_lp, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTKIT_H */

#ifndef TERNARY_SPIKE_H
#define TERNARY_SPIKE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_IO = 3,
  TS_STATUS_FORMAT = 4,
  TS_STATUS_CONFIG = 5,
  TS_STATUS_DIMENSION = 6,
  TS_STATUS_CONTRACT = 7,
  TS_STATUS_CONVERSION = 8,
  TS_STATUS_VERIFICATION = 9,
  TS_STATUS_DIVERGENCE = 10,
  TS_STATUS_SERIALIZATION = 11,
  TS_STATUS_BUFFER_TOO_SMALL = 12,
  TS_STATUS_PANIC = 13,
} TsStatus;

/**
 * Opaque network handle.
 */
typedef struct TsNetwork TsNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the message length without the terminator; if that is
 * `>= len` the copy was truncated.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ts_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ts_version(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TsStatus ts_network_load(const char *path, struct TsNetwork **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `net` must come from [`ts_network_load`] and not be used afterwards.
 */
void ts_network_free(struct TsNetwork *net);

/**
 * Number of `f32` values in one input sample.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum TsStatus ts_network_input_len(const struct TsNetwork *net, size_t *out);

/**
 * Number of output classes.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum TsStatus ts_network_num_classes(const struct TsNetwork *net, size_t *out);

/**
 * Runs `samples` inputs (row-major, `samples * input_len` values) and
 * writes `samples * num_classes` logits. `sparsity` receives the overall
 * firing rate when non-null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum TsStatus ts_network_forward(const struct TsNetwork *net,
                                 const float *input,
                                 size_t samples,
                                 float *logits,
                                 size_t logits_len,
                                 double *sparsity);

/**
 * Folds trainable amplitudes of the checkpoint at `input_path`, checks the
 * result on `probe_samples` caller-supplied inputs and, if every logit is
 * within `tolerance`, saves it to `output_path`. `max_deviation` receives
 * the largest absolute logit difference either way.
 *
 * # Safety
 * Paths must be NUL-terminated; `probe` must hold
 * `probe_samples * input_len` values.
 */
enum TsStatus ts_convert_checkpoint(const char *input_path,
                                    const char *output_path,
                                    const float *probe,
                                    size_t probe_samples,
                                    double tolerance,
                                    double *max_deviation);

/**
 * Energy in joules with the default per-operation costs.
 *
 * # Safety
 * `out_joules` must be writable.
 */
enum TsStatus ts_energy(double flops, double sops, double signs, double *out_joules);

/**
 * Energy in joules with explicit per-operation costs (joules each).
 *
 * # Safety
 * `out_joules` must be writable.
 */
enum TsStatus ts_energy_with_costs(double flops,
                                   double sops,
                                   double signs,
                                   double e_flop,
                                   double e_sop,
                                   double e_sign,
                                   double *out_joules);

/**
 * Additions of the equivalent non-spiking network implied by
 * `sops = sparsity * timesteps * A`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TsStatus ts_implied_ann_additions(double sops, double sparsity, double timesteps, double *out);

/**
 * Information capacity in bits of a feature map of the given shape whose
 * elements take `alphabet` values.
 *
 * # Safety
 * `shape` must hold `rank` values; `out_bits` must be writable.
 */
enum TsStatus ts_capacity_bits(const size_t *shape, size_t rank, size_t alphabet, double *out_bits);

/**
 * Shannon entropy in bits of a probability vector.
 *
 * # Safety
 * `p` must hold `len` values; `out_bits` must be writable.
 */
enum TsStatus ts_entropy_bits(const double *p, size_t len, double *out_bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TERNARY_SPIKE_H */

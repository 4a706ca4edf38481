#ifndef SOFTHJB_H
#define SOFTHJB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  SOFTHJB_STATUS_OK = 0,
  SOFTHJB_STATUS_NULL_POINTER = 1,
  SOFTHJB_STATUS_INVALID_ARGUMENT = 2,
  SOFTHJB_STATUS_CONFIG = 3,
  SOFTHJB_STATUS_DIMENSION_MISMATCH = 4,
  SOFTHJB_STATUS_CURVATURE_COLLAPSE = 5,
  SOFTHJB_STATUS_NON_FINITE = 6,
  SOFTHJB_STATUS_IO = 7,
  SOFTHJB_STATUS_FORMAT = 8,
  SOFTHJB_STATUS_PANIC = 9,
} SofthjbStatus;

/**
 * A parsed run configuration: model, behavioral policy and run settings.
 */
typedef struct SofthjbConfig SofthjbConfig;

/**
 * A set of logged trajectories.
 */
typedef struct SofthjbDataset SofthjbDataset;

/**
 * A value network.
 */
typedef struct SofthjbNetwork SofthjbNetwork;

/**
 * Library version as a static NUL-terminated string.
 */
const char *softhjb_version(void);

/**
 * Message for the most recent failure on this thread, or NULL. Valid until
 * the next library call on the same thread.
 */
const char *softhjb_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void softhjb_string_free(char *s);

/**
 * Parses a JSON run configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_config` must be writable.
 */
SofthjbStatus softhjb_config_from_json(const char *json, SofthjbConfig **out_config);

/**
 * # Safety
 * `config` must be NULL or a handle from `softhjb_config_from_json`, not yet freed.
 */
void softhjb_config_free(SofthjbConfig *config);

/**
 * Writes the state dimension, action dimension and number of mixture components.
 *
 * # Safety
 * `config` must be a live handle; output pointers must be writable.
 */
SofthjbStatus softhjb_config_dims(const SofthjbConfig *config,
                                  size_t *out_state_dim,
                                  size_t *out_action_dim,
                                  size_t *out_components);

/**
 * Loads a network or training checkpoint from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_network` must be writable.
 */
SofthjbStatus softhjb_network_from_json(const char *json, SofthjbNetwork **out_network);

/**
 * Serializes a network to JSON; release the result with `softhjb_string_free`.
 *
 * # Safety
 * `network` must be a live handle; `out_json` must be writable.
 */
SofthjbStatus softhjb_network_to_json(const SofthjbNetwork *network, char **out_json);

/**
 * # Safety
 * `network` must be NULL or a live handle, not yet freed.
 */
void softhjb_network_free(SofthjbNetwork *network);

/**
 * Evaluates `J(x, cost, t)`.
 *
 * # Safety
 * `network` must be a live handle, `x` must point to `x_len` doubles, and
 * `out_value` must be writable.
 */
SofthjbStatus softhjb_network_eval(const SofthjbNetwork *network,
                                   const double *x,
                                   size_t x_len,
                                   double cost,
                                   double t,
                                   double *out_value);

/**
 * Extracted mixture at `(x, cost, t)`. Writes `K` weights, `K * M` means
 * (component-major) and `K` isotropic variances.
 *
 * # Safety
 * Handles must be live; `x` must hold `x_len` doubles; `out_weights` and
 * `out_variances` must hold `K` doubles and `out_means` `K * M`.
 */
SofthjbStatus softhjb_posterior_policy(const SofthjbConfig *config,
                                       const SofthjbNetwork *network,
                                       const double *x,
                                       size_t x_len,
                                       double cost,
                                       double t,
                                       double *out_weights,
                                       double *out_means,
                                       double *out_variances);

/**
 * Simulates a behavioral dataset with the configured initial-state sampler.
 *
 * # Safety
 * `config` must be a live handle; `out_dataset` must be writable.
 */
SofthjbStatus softhjb_simulate(const SofthjbConfig *config,
                               size_t n_trajectories,
                               uint64_t seed,
                               SofthjbDataset **out_dataset);

/**
 * Loads a JSON Lines dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_dataset` must be writable.
 */
SofthjbStatus softhjb_dataset_load(const char *path, SofthjbDataset **out_dataset);

/**
 * # Safety
 * `dataset` must be a live handle; `path` a NUL-terminated string.
 */
SofthjbStatus softhjb_dataset_save(const SofthjbDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must be a live handle; `out_len` must be writable.
 */
SofthjbStatus softhjb_dataset_len(const SofthjbDataset *dataset, size_t *out_len);

/**
 * # Safety
 * `dataset` must be NULL or a live handle, not yet freed.
 */
void softhjb_dataset_free(SofthjbDataset *dataset);

/**
 * Trains a freshly initialized network with the configuration's `train` section.
 *
 * # Safety
 * Handles must be live; `out_network` must be writable.
 */
SofthjbStatus softhjb_train(const SofthjbConfig *config,
                            const SofthjbDataset *dataset,
                            SofthjbNetwork **out_network);

#endif  /* SOFTHJB_H */

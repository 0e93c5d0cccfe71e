#ifndef KOOPMAN_LAB_H
#define KOOPMAN_LAB_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every `kl_*` call.
 */
typedef enum KlStatus {
  KlOk = 0,
  /**
   * A required pointer argument was null.
   */
  KlNullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KlInvalidUtf8 = 2,
  /**
   * Rejected configuration or argument value.
   */
  KlInvalidArgument = 3,
  /**
   * Numerical failure (non-convergence, divergence, non-finite values).
   */
  KlNumerical = 4,
  /**
   * File I/O or serialization failure.
   */
  KlIo = 5,
} KlStatus;

/**
 * Opaque trajectory dataset.
 */
typedef struct KlDataset KlDataset;

/**
 * Opaque neural Koopman model.
 */
typedef struct KlModel KlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. Valid until the next
 * failing `kl_*` call on the same thread; never null.
 */
const char *kl_last_error_message(void);

/**
 * Generate a dataset with `m` training transitions in windows of `t_win`.
 * `env` is one of "polynomial", "damped-pendulum", "double-pendulum";
 * `n_poly` is only read for the polynomial system.
 *
 * # Safety
 * `env` must be a valid C string; `out` must point to writable storage.
 */
enum KlStatus kl_dataset_generate(const char *env,
                                  uintptr_t n_poly,
                                  uintptr_t m,
                                  uintptr_t t_win,
                                  uint64_t seed,
                                  struct KlDataset **out);

/**
 * # Safety
 * `path` must be a valid C string; `out` must point to writable storage.
 */
enum KlStatus kl_dataset_load(const char *path, struct KlDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `path` a valid C string.
 */
enum KlStatus kl_dataset_save(const struct KlDataset *ds, const char *path);

/**
 * Training transitions in the dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live dataset handle or null.
 */
uintptr_t kl_dataset_transitions(const struct KlDataset *ds);

/**
 * # Safety
 * `ds` must be a handle from this library or null; it is invalid afterwards.
 */
void kl_dataset_free(struct KlDataset *ds);

/**
 * Train a neural Koopman model. `config_json` mirrors the CLI training
 * config one-to-one and may be null for defaults.
 *
 * # Safety
 * `ds` must be a live dataset handle; `config_json` null or a valid C
 * string; `out` must point to writable storage.
 */
enum KlStatus kl_train(const struct KlDataset *ds, const char *config_json, struct KlModel **out);

/**
 * # Safety
 * `path` must be a valid C string; `out` must point to writable storage.
 */
enum KlStatus kl_model_load(const char *path, struct KlModel **out);

/**
 * # Safety
 * `model` must be a live model handle; `path` a valid C string.
 */
enum KlStatus kl_model_save(const struct KlModel *model, const char *path);

/**
 * State dimension n_x; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live model handle or null.
 */
uintptr_t kl_model_state_dim(const struct KlModel *model);

/**
 * Latent dimension n; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live model handle or null.
 */
uintptr_t kl_model_latent_dim(const struct KlModel *model);

/**
 * Encode a state into the latent embedding z = [x; psi(x)]. `x` holds
 * `kl_model_state_dim` values, `z` receives `kl_model_latent_dim` values.
 *
 * # Safety
 * `model` must be a live model handle; `x` and `z` must be valid buffers
 * of the stated lengths.
 */
enum KlStatus kl_model_encode(const struct KlModel *model,
                              const double *x,
                              uintptr_t x_len,
                              double *z,
                              uintptr_t z_len);

/**
 * Undiscounted multi-step test error at the given horizon.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out_eps` must be writable.
 */
enum KlStatus kl_eval(const struct KlModel *model,
                      const struct KlDataset *ds,
                      uintptr_t horizon,
                      double *out_eps);

/**
 * # Safety
 * `model` must be a handle from this library or null; invalid afterwards.
 */
void kl_model_free(struct KlModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_LAB_H */

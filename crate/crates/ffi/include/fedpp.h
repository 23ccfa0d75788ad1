#ifndef FEDPP_H
#define FEDPP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum FedppStatus {
  FEDPP_STATUS_OK = 0,
  FEDPP_STATUS_NULL_POINTER = 1,
  FEDPP_STATUS_INVALID_ARGUMENT = 2,
  FEDPP_STATUS_DIMENSION_MISMATCH = 3,
  FEDPP_STATUS_NUMERICAL = 4,
  FEDPP_STATUS_IO = 5,
  FEDPP_STATUS_VERSION_MISMATCH = 6,
  FEDPP_STATUS_BUFFER_TOO_SMALL = 7,
  FEDPP_STATUS_PANIC = 8,
} FedppStatus;

// Diagonal Gaussian over a parameter vector.
typedef struct FedppGaussian FedppGaussian;

// A trained model loaded from a model file.
typedef struct FedppModel FedppModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next call.
const char *fedpp_last_error_message(void);

// Parameter packing version, a static string.
const char *fedpp_packing_version(void);

// Creates a Gaussian from `dim` means and positive variances.
//
// # Safety
// `mean` and `var` must point to `dim` readable doubles; `out` must be
// writable.
enum FedppStatus fedpp_gaussian_new(const double *mean,
                                    const double *var,
                                    size_t dim,
                                    struct FedppGaussian **out);

// # Safety
// `g` must be null or a handle from this library, freed at most once.
void fedpp_gaussian_free(struct FedppGaussian *g);

// # Safety
// `g` must be a live handle and `out` writable.
enum FedppStatus fedpp_gaussian_dim(const struct FedppGaussian *g, size_t *out);

// Copies the means into `out`, which holds `len` doubles.
//
// # Safety
// `g` must be a live handle; `out` must hold `len` writable doubles.
enum FedppStatus fedpp_gaussian_mean(const struct FedppGaussian *g, double *out, size_t len);

// Copies the variances into `out`, which holds `len` doubles.
//
// # Safety
// As for [`fedpp_gaussian_mean`].
enum FedppStatus fedpp_gaussian_var(const struct FedppGaussian *g, double *out, size_t len);

// `KL(q || p)`.
//
// # Safety
// `q`, `p` must be live handles and `out` writable.
enum FedppStatus fedpp_kl(const struct FedppGaussian *q,
                          const struct FedppGaussian *p,
                          double *out);

// Pólya-Gamma mean `E[PG(1, c)]`.
//
// # Safety
// `out` must be writable.
enum FedppStatus fedpp_pg_mean(double c, double *out);

// Aggregates `n` client Gaussians with `method` (`fedavg`, `kl`, `w2` or
// `mmd`) into a new handle.
//
// # Safety
// `clients` must point to `n` live handles; `method` must be a
// NUL-terminated string; `out` must be writable.
enum FedppStatus fedpp_aggregate(const struct FedppGaussian *const *clients,
                                 size_t n,
                                 const char *method,
                                 struct FedppGaussian **out);

// Loads a model file written by `fedpp train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FedppStatus fedpp_model_load(const char *path, struct FedppModel **out);

// # Safety
// `m` must be null or a handle from this library, freed at most once.
void fedpp_model_free(struct FedppModel *m);

// # Safety
// `m` must be a live handle and `out` writable.
enum FedppStatus fedpp_model_num_clients(const struct FedppModel *m, size_t *out);

// Copies the global prior into a new handle.
//
// # Safety
// `m` must be a live handle and `out` writable.
enum FedppStatus fedpp_model_theta(const struct FedppModel *m, struct FedppGaussian **out);

// Predictive intensity of client `client` at `n` times, written to `out`.
//
// # Safety
// `m` must be a live handle; `times` and `out` must hold `n` doubles.
enum FedppStatus fedpp_model_intensity(const struct FedppModel *m,
                                       size_t client,
                                       const double *times,
                                       size_t n,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDPP_H */

/* C interface to the venteval pipeline.
 *
 * Usage pattern: load fitted JSON artifacts into opaque handles, query
 * them pointwise, free them. Every fallible function returns an error
 * code from the VENTEVAL_* list below and stores a message retrievable
 * with venteval_last_error(); the message is per thread and overwritten
 * by the next failing call.
 *
 * Maintained by hand; kept in sync with the Rust crate by its tests.
 */

#ifndef VENTEVAL_H
#define VENTEVAL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Error codes. */
#define VENTEVAL_OK 0
#define VENTEVAL_ERR_INVALID_ARGUMENT 1
#define VENTEVAL_ERR_DATA 2
#define VENTEVAL_ERR_NUMERIC 3
#define VENTEVAL_ERR_IO 4
#define VENTEVAL_ERR_SERDE 5
#define VENTEVAL_ERR_NULL_POINTER 6
#define VENTEVAL_ERR_UTF8 7
#define VENTEVAL_ERR_BUFFER_TOO_SMALL 8
#define VENTEVAL_ERR_PANIC 9

/* Array dimensions. */
#define VENTEVAL_STATE_DIM 16
#define VENTEVAL_TARGET_DIM 13
#define VENTEVAL_N_TYPE_FEATURES 10

/* Opaque handles. */
typedef struct VentevalPolicy VentevalPolicy;
typedef struct VentevalPropensity VentevalPropensity;
typedef struct VentevalNwe VentevalNwe;

/* Copy the crate version into buf (truncating; NUL-terminated whenever
 * len > 0) and return the untruncated string length. buf may be NULL to
 * query the length. */
size_t venteval_version(char *buf, size_t len);

/* Copy the current thread's last error message; same semantics as
 * venteval_version. Empty string when no error has occurred. */
size_t venteval_last_error(char *buf, size_t len);

/* Map raw ventilator settings (tidal volume ml/kg, PEEP cmH2O, FiO2
 * fraction) to their 1-based bins. Fails on negative values or FiO2
 * above 1. */
int venteval_discretize_action(double vt_raw, double peep_raw, double fio2_raw,
                               uint8_t *vt_bin, uint8_t *peep_bin,
                               uint8_t *fio2_bin);

/* Canonical continuous settings for a binned action: the bin midpoint,
 * or a nominal interior point for the unbounded top bins. */
int venteval_representative_action(uint8_t vt_bin, uint8_t peep_bin,
                                   uint8_t fio2_bin, double *vt_raw,
                                   double *peep_raw, double *fio2_raw);

/* One-step reward for (state, action, next_state) under penalty weights
 * (alpha, beta). Both states are VENTEVAL_STATE_DIM doubles. */
int venteval_reward(const double *state, const double *next_state,
                    uint8_t vt_bin, uint8_t peep_bin, uint8_t fio2_bin,
                    double alpha, double beta, double *reward);

/* Policies (bc.json / cqi.json / cq.json written by `venteval train`). */
int venteval_policy_load(const char *path, VentevalPolicy **out);
void venteval_policy_free(VentevalPolicy *policy);

/* Policy family name ("bc", "cqi", "cq"); buf must hold at least
 * strlen(kind) + 1 bytes. */
int venteval_policy_kind(const VentevalPolicy *policy, char *buf, size_t len);

/* Greedy action at a VENTEVAL_STATE_DIM-dimensional state. */
int venteval_policy_decide(const VentevalPolicy *policy, const double *state,
                           uint8_t *vt_bin, uint8_t *peep_bin,
                           uint8_t *fio2_bin);

/* Propensity model (propensity.json written by `venteval fit-propensity`). */
int venteval_propensity_load(const char *path, VentevalPropensity **out);
void venteval_propensity_free(VentevalPropensity *model);

/* Probability of 90-day mortality from VENTEVAL_N_TYPE_FEATURES type
 * features; this is the pipeline's z covariate. */
int venteval_propensity_predict(const VentevalPropensity *model,
                                const double *features, double *z);

/* Transition model (nwe.json written by `venteval fit-transition`). */
int venteval_nwe_load(const char *path, VentevalNwe **out);
void venteval_nwe_free(VentevalNwe *model);

/* Predict the VENTEVAL_TARGET_DIM next-state targets (12 dynamic
 * features plus the propensity slot) for a query (state, action, z).
 * *fallback is set to 1 when the nearest-neighbor fallback produced the
 * prediction, else 0. */
int venteval_nwe_predict(const VentevalNwe *model, const double *state,
                         uint8_t vt_bin, uint8_t peep_bin, uint8_t fio2_bin,
                         double z, double *next_targets, int *fallback);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VENTEVAL_H */

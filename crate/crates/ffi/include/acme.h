#ifndef ACME_H
#define ACME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AcmeStatus {
  ACME_STATUS_OK = 0,
  ACME_STATUS_NULL_ARGUMENT = 1,
  ACME_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A configuration or scenario file was rejected.
   */
  ACME_STATUS_CONFIG = 3,
  ACME_STATUS_RUNTIME = 4,
  /**
   * The output buffer was too small; the needed size was written.
   */
  ACME_STATUS_BUFFER_TOO_SMALL = 5,
  ACME_STATUS_PANIC = 6,
} AcmeStatus;

/**
 * Aggregation state for one operator, merged the way tree nodes merge
 * their children.
 */
typedef struct AcmeAggregator AcmeAggregator;

typedef struct AcmeCluster AcmeCluster;

/**
 * A running node: overlay, ISING endpoint and sensor servers.
 */
typedef struct AcmeNode AcmeNode;

typedef struct AcmeScenario AcmeScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *acme_last_error(void);

const char *acme_version(void);

/**
 * `op` is one of MIN, MAX, SUM, COUNT, AVG, MEDIAN, VALUE.
 *
 * # Safety
 * `op` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AcmeStatus acme_aggregator_new(const char *op, struct AcmeAggregator **out);

/**
 * Adds one reading reported by `source`.
 *
 * # Safety
 * `agg` must come from [`acme_aggregator_new`]; `source` must be a
 * NUL-terminated string.
 */
enum AcmeStatus acme_aggregator_add(struct AcmeAggregator *agg, const char *source, double value);

/**
 * Merges `src` into `dst`. Both must use the same operator.
 *
 * # Safety
 * Both handles must come from [`acme_aggregator_new`].
 */
enum AcmeStatus acme_aggregator_merge(struct AcmeAggregator *dst, const struct AcmeAggregator *src);

/**
 * Aggregate value. Fails when no reading has been added or the operator
 * has no single numeric result.
 *
 * # Safety
 * `agg` must come from [`acme_aggregator_new`]; `out` must be valid.
 */
enum AcmeStatus acme_aggregator_value(const struct AcmeAggregator *agg, double *out);

/**
 * Number of readings merged so far.
 *
 * # Safety
 * `agg` must come from [`acme_aggregator_new`]; `out` must be valid.
 */
enum AcmeStatus acme_aggregator_count(const struct AcmeAggregator *agg, uint64_t *out);

/**
 * # Safety
 * `agg` must come from [`acme_aggregator_new`] or be NULL.
 */
void acme_aggregator_free(struct AcmeAggregator *agg);

/**
 * Loads a scenario file. Relative paths inside it resolve against its
 * directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AcmeStatus acme_scenario_load(const char *path, struct AcmeScenario **out);

/**
 * # Safety
 * `s` must come from [`acme_scenario_load`].
 */
enum AcmeStatus acme_scenario_set_seed(struct AcmeScenario *s, uint64_t seed);

/**
 * Runs the scenario and writes its CSV tables into `out_dir`.
 *
 * # Safety
 * `s` must come from [`acme_scenario_load`]; `out_dir` must be a
 * NUL-terminated string.
 */
enum AcmeStatus acme_scenario_run(const struct AcmeScenario *s, const char *out_dir);

/**
 * # Safety
 * `s` must come from [`acme_scenario_load`] or be NULL.
 */
void acme_scenario_free(struct AcmeScenario *s);

/**
 * Writes the aggregated report tables for a results directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string.
 */
enum AcmeStatus acme_report(const char *dir);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AcmeStatus acme_cluster_load(const char *path, struct AcmeCluster **out);

/**
 * # Safety
 * `c` must come from [`acme_cluster_load`]; `out` must be valid.
 */
enum AcmeStatus acme_cluster_node_count(const struct AcmeCluster *c, size_t *out);

/**
 * # Safety
 * `c` must come from [`acme_cluster_load`] or be NULL.
 */
void acme_cluster_free(struct AcmeCluster *c);

/**
 * Starts node `index` of the cluster. The node keeps running until
 * [`acme_node_free`]. `ledger_dir` may be NULL.
 *
 * # Safety
 * `c` must come from [`acme_cluster_load`]; `ledger_dir` must be NULL or a
 * NUL-terminated string; `out` must be valid.
 */
enum AcmeStatus acme_node_start(const struct AcmeCluster *c,
                                size_t index,
                                const char *ledger_dir,
                                struct AcmeNode **out);

/**
 * `host:port` of the node's `/ising` endpoint.
 *
 * # Safety
 * `n` must come from [`acme_node_start`]; `buf` must hold `len` bytes;
 * `needed` may be NULL.
 */
enum AcmeStatus acme_node_ising_addr(const struct AcmeNode *n,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

/**
 * Stops the node and releases it.
 *
 * # Safety
 * `n` must come from [`acme_node_start`] or be NULL.
 */
void acme_node_free(struct AcmeNode *n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACME_H */

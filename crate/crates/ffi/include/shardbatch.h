#ifndef SHARDBATCH_H
#define SHARDBATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, bad JSON or an out-of-range argument.
   */
  SB_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Connect, read or write failed, or timed out.
   */
  SB_STATUS_TRANSPORT = 2,
  /**
   * Cluster token missing or wrong.
   */
  SB_STATUS_AUTH = 3,
  SB_STATUS_NOT_FOUND = 4,
  SB_STATUS_MALFORMED_FILTER = 5,
  /**
   * A find lost one or more shards; no documents were returned.
   */
  SB_STATUS_PARTIAL_RESULTS = 6,
  /**
   * No shard or config server could serve the request.
   */
  SB_STATUS_UNAVAILABLE = 7,
  SB_STATUS_PROTOCOL = 8,
  /**
   * Any other failure reported by the cluster.
   */
  SB_STATUS_FAILED = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  SB_STATUS_PANIC = 10,
} SbStatus;

/**
 * Opaque connection to one router.
 */
typedef struct SbClient SbClient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *sb_last_error(void);

/**
 * Releases a string returned through an `out_json` parameter.
 *
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void sb_string_free(char *s);

/**
 * Days of metrics to generate for a job of `nodes` nodes.
 *
 * # Safety
 * `out_days` must be NULL or point to writable memory.
 */
enum SbStatus sb_days_for_nodes(size_t nodes, uint32_t *out_days);

/**
 * Splits the hosts of a nodefile (one hostname per line) into roles.
 * Writes `{"config_nodes":[..],"shard_nodes":[..],"router_nodes":[..],
 * "client_nodes":[..]}` to `out_json`.
 *
 * # Safety
 * `nodefile_text` must be a NUL-terminated string; `out_json` must point to
 * writable memory.
 */
enum SbStatus sb_assign_roles(const char *nodefile_text, bool strict, char **out_json);

/**
 * Connects to a router at `host:port`.
 *
 * # Safety
 * `endpoint` must be a NUL-terminated string; `out_client` must point to
 * writable memory.
 */
enum SbStatus sb_client_connect(const char *endpoint,
                                uint32_t timeout_ms,
                                struct SbClient **out_client);

/**
 * Closes the connection and frees the handle.
 *
 * # Safety
 * `client` must be NULL or a handle from `sb_client_connect`, not yet freed.
 */
void sb_client_free(struct SbClient *client);

/**
 * # Safety
 * `client` must be a live handle from `sb_client_connect`.
 */
enum SbStatus sb_client_ping(struct SbClient *client);

/**
 * Unordered insert of a JSON array of documents. Writes
 * `{"inserted_count":N,"errors":[{"batch_index":I,"code":..,"message":..}]}`
 * to `out_json`; per-document errors still return `SB_STATUS_OK`.
 *
 * # Safety
 * `client` must be a live handle; `collection` and `docs_json` must be
 * NUL-terminated strings; `out_json` must point to writable memory.
 */
enum SbStatus sb_client_insert_many(struct SbClient *client,
                                    const char *collection,
                                    const char *docs_json,
                                    char **out_json);

/**
 * Runs a find and writes the matching documents as a JSON array.
 *
 * # Safety
 * As for `sb_client_insert_many`, with `filter_json` a JSON filter object.
 */
enum SbStatus sb_client_find(struct SbClient *client,
                             const char *collection,
                             const char *filter_json,
                             char **out_json);

/**
 * Counts the documents matching a JSON filter without copying them out.
 *
 * # Safety
 * `client` must be a live handle; string arguments NUL-terminated;
 * `out_count` must point to writable memory.
 */
enum SbStatus sb_client_find_count(struct SbClient *client,
                                   const char *collection,
                                   const char *filter_json,
                                   uint64_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHARDBATCH_H */

#ifndef PGUARD_H
#define PGUARD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Report layout for [`pg_scenario_run`].
typedef enum PgFormat {
  PG_FORMAT_TABLE = 0,
  PG_FORMAT_TABLE_MASKED = 1,
  PG_FORMAT_RECORDS = 2,
} PgFormat;

// Run mode for [`pg_scenario_run`].
typedef enum PgMode {
  PG_MODE_UNGUARDED = 0,
  PG_MODE_GUARDED = 1,
  PG_MODE_DIFFERENTIAL = 2,
} PgMode;

// Conflict policy; `SCENARIO` keeps the policy from the scenario file.
typedef enum PgPolicy {
  PG_POLICY_SCENARIO = 0,
  PG_POLICY_LAST_WINS = 1,
  PG_POLICY_FIRST_WINS = 2,
  PG_POLICY_FAIL = 3,
} PgPolicy;

// Result of every call.
typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_ARGUMENT = 1,
  PG_STATUS_INVALID_UTF8 = 2,
  PG_STATUS_INVALID_ARGUMENT = 3,
  PG_STATUS_RECORDS = 4,
  PG_STATUS_APPLY = 5,
  PG_STATUS_SCENARIO = 6,
  PG_STATUS_CONFLICT = 7,
  PG_STATUS_PRIVILEGE_DENIED = 8,
  PG_STATUS_INTERNAL = 9,
  PG_STATUS_PANIC = 10,
} PgStatus;

// A parsed scenario.
typedef struct PgScenario PgScenario;

// A parsed DOM tree.
typedef struct PgTree PgTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string. Do not free.
const char *pg_version(void);

// Message for the last failing call on this thread, or null. The pointer
// stays valid until the next failing call on this thread. Do not free.
const char *pg_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` is null or a string returned through an `out` parameter of this
// library that has not been freed.
void pg_string_free(char *s);

// Parses HTML leniently into a tree.
//
// # Safety
// `html` is a NUL-terminated string; `out` is writable.
enum PgStatus pg_tree_parse(const char *html, struct PgTree **out);

// Serializes a tree to canonical HTML.
//
// # Safety
// `tree` is a live handle; `out` is writable.
enum PgStatus pg_tree_serialize(const struct PgTree *tree, char **out);

// Node count of a tree, or 0 for null.
//
// # Safety
// `tree` is null or a live handle.
size_t pg_tree_size(const struct PgTree *tree);

// Releases a tree. Null is ignored.
//
// # Safety
// `tree` is null or a live handle not used afterwards.
void pg_tree_free(struct PgTree *tree);

// Edit script from `pre` to `post` as patch records.
//
// # Safety
// `pre` and `post` are live handles; `out` is writable.
enum PgStatus pg_tree_diff(const struct PgTree *pre, const struct PgTree *post, char **out);

// Applies patch records, in order, to a copy of `tree`.
//
// # Safety
// `tree` is a live handle; `records` is a NUL-terminated string; `out` is
// writable.
enum PgStatus pg_tree_apply(const struct PgTree *tree, const char *records, struct PgTree **out);

// Parses scenario text.
//
// # Safety
// `source` is a NUL-terminated string; `out` is writable.
enum PgStatus pg_scenario_parse(const char *source, struct PgScenario **out);

// Loads a scenario file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PgStatus pg_scenario_load(const char *path, struct PgScenario **out);

// Releases a scenario. Null is ignored.
//
// # Safety
// `scenario` is null or a live handle not used afterwards.
void pg_scenario_free(struct PgScenario *scenario);

// Runs a scenario. `mode`, `policy` and `format` take `PgMode`,
// `PgPolicy` and `PgFormat` values. On success `out_report` receives the
// report and `out_exit_code`, if not null, the command-line exit code
// (0, or 3 when integrity violations were found).
//
// # Safety
// `scenario` is a live handle; `out_report` is writable; `out_exit_code`
// is null or writable.
enum PgStatus pg_scenario_run(const struct PgScenario *scenario,
                              uint32_t mode,
                              uint32_t policy,
                              uint32_t format,
                              char **out_report,
                              int32_t *out_exit_code);

// Checks the guarded slot layout. `out_count` receives the number of
// violations and `out_report`, if not null, one line per violation.
//
// # Safety
// `scenario` is a live handle; `out_count` is writable; `out_report` is
// null or writable.
enum PgStatus pg_scenario_verify(const struct PgScenario *scenario,
                                 size_t *out_count,
                                 char **out_report);

// The guarded run's patch store as records.
//
// # Safety
// `scenario` is a live handle; `out` is writable.
enum PgStatus pg_scenario_dump_store(const struct PgScenario *scenario,
                                     uint32_t policy,
                                     char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGUARD_H */

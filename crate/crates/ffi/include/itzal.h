#ifndef ITZAL_H
#define ITZAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ItzalStatus {
  ITZAL_STATUS_OK = 0,
  ITZAL_STATUS_NULL_ARGUMENT = 1,
  ITZAL_STATUS_INVALID_UTF8 = 2,
  ITZAL_STATUS_PARSE = 3,
  ITZAL_STATUS_INVALID_JSON = 4,
  ITZAL_STATUS_UNKNOWN_HANDLER = 5,
  ITZAL_STATUS_PATCH = 6,
  ITZAL_STATUS_RULE = 7,
  ITZAL_STATUS_PANIC = 8,
} ItzalStatus;

/**
 * A parsed program.
 */
typedef struct ItzalProgram ItzalProgram;

/**
 * Caller-owned bytes.
 */
typedef struct ItzalBytes {
  uint8_t *data;
  size_t len;
} ItzalBytes;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *itzal_last_error(void);

/**
 * Static version string.
 */
const char *itzal_version(void);

/**
 * Parses handler source into a new program.
 *
 * # Safety
 * `source` must be a NUL-terminated string; `out` must be writable.
 */
enum ItzalStatus itzal_program_parse(const char *source, struct ItzalProgram **out);

/**
 * # Safety
 * `program` must be null or a handle from this library not yet freed.
 */
void itzal_program_free(struct ItzalProgram *program);

/**
 * Canonical source of the program.
 *
 * # Safety
 * `program` must be a live handle; `out` must be writable.
 */
enum ItzalStatus itzal_program_render(const struct ItzalProgram *program, char **out);

/**
 * Runs `handler` on a JSON request against JSON state (an object, or
 * null for empty). Writes `{"outcome", "executed_lines", "state",
 * "state_version"}` as JSON.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings, `program` a live handle
 * and `out` writable. `state_json` may be null.
 */
enum ItzalStatus itzal_program_execute(const struct ItzalProgram *program,
                                       const char *handler,
                                       const char *request_json,
                                       const char *state_json,
                                       char **out);

/**
 * Candidate patches for a JSON failure point, in template order.
 * `early_json` gives the early-return status and body, or null for the
 * defaults.
 *
 * # Safety
 * As for [`itzal_program_execute`]; `early_json` may be null.
 */
enum ItzalStatus itzal_program_enumerate_patches(const struct ItzalProgram *program,
                                                 const char *failure_point_json,
                                                 const char *early_json,
                                                 char **out);

/**
 * Applies a JSON patch, producing a new program. The input is unchanged.
 *
 * # Safety
 * As for [`itzal_program_execute`].
 */
enum ItzalStatus itzal_program_apply_patch(const struct ItzalProgram *program,
                                           const char *patch_json,
                                           struct ItzalProgram **out);

/**
 * Normalizes `len` bytes at `body` with a JSON array of rules.
 *
 * # Safety
 * `rules_json` must be a NUL-terminated string, `body` must point at
 * `len` readable bytes (or be null with `len == 0`), `out` writable.
 */
enum ItzalStatus itzal_normalize(const char *rules_json,
                                 const uint8_t *body,
                                 size_t len,
                                 struct ItzalBytes *out);

/**
 * Judges a JSON response and outcome with the default oracle. Writes the
 * verdict as JSON.
 *
 * # Safety
 * As for [`itzal_program_execute`].
 */
enum ItzalStatus itzal_judge(const char *response_json, const char *outcome_json, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void itzal_string_free(char *s);

/**
 * # Safety
 * `bytes` must have been filled by this library and not yet freed.
 */
void itzal_bytes_free(struct ItzalBytes bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITZAL_H */

/* SPDX-License-Identifier: Apache-2.0 */

#ifndef RTAUDIT_H
#define RTAUDIT_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum RtStatus {
  RT_STATUS_OK = 0,
  RT_STATUS_NULL_POINTER = 1,
  RT_STATUS_INVALID_UTF8 = 2,
  /**
   * Scenario file or assembly could not be parsed.
   */
  RT_STATUS_PARSE = 3,
  /**
   * Instrumentation rejected the program.
   */
  RT_STATUS_INSTRUMENT = 4,
  RT_STATUS_IO = 5,
  /**
   * Register index out of range.
   */
  RT_STATUS_OUT_OF_RANGE = 6,
  /**
   * The machine faulted; see the last error for the address.
   */
  RT_STATUS_FAULT = 7,
  /**
   * The scenario ran but at least one expectation failed.
   */
  RT_STATUS_EXPECTATION_FAILED = 8,
  RT_STATUS_PANIC = 9,
} RtStatus;

/**
 * A bare machine running an uninstrumented program in the non-secure world.
 */
typedef struct RtMachine RtMachine;

/**
 * A loaded scenario.
 */
typedef struct RtScenario RtScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * call on the same thread; never null.
 */
const char *rt_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void rt_string_free(char *s);

/**
 * Instruments assembly source. Writes the rewritten source and the
 * instrumentation map (TOML). Either output may be null if unwanted.
 *
 * # Safety
 * `src` must be a NUL-terminated string; outputs must be valid or null.
 */
enum RtStatus rt_instrument(const char *src, char **out_source, char **out_map);

/**
 * Loads a scenario file. Relative program paths resolve against the file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_scenario_load(const char *path, struct RtScenario **out);

/**
 * Creates a scenario with default settings around inline assembly.
 *
 * # Safety
 * `src` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_scenario_from_source(const char *src, struct RtScenario **out);

/**
 * Overrides seed, timer period (NS instructions) and log capacity (bytes).
 * Zero leaves a value unchanged.
 *
 * # Safety
 * `s` must be a live handle.
 */
enum RtStatus rt_scenario_configure(struct RtScenario *s,
                                    uint64_t seed,
                                    uint64_t delta,
                                    size_t log_max);

/**
 * Sets the App input sequence.
 *
 * # Safety
 * `s` must be a live handle; `input` must point to `len` words (or be null
 * when `len` is zero).
 */
enum RtStatus rt_scenario_set_input(struct RtScenario *s, const uint32_t *input, size_t len);

/**
 * Runs a scenario and writes its result as a JSON object. The JSON is
 * produced even when an expectation fails, in which case the status is
 * `EXPECTATION_FAILED`.
 *
 * # Safety
 * `s` must be a live handle and `out_json` a valid pointer.
 */
enum RtStatus rt_scenario_run(const struct RtScenario *s, char **out_json);

/**
 * # Safety
 * `s` must be null or a handle that has not been freed.
 */
void rt_scenario_free(struct RtScenario *s);

/**
 * Assembles a program onto a fresh machine.
 *
 * # Safety
 * `src` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_machine_load(const char *src, struct RtMachine **out);

/**
 * Executes up to `max_steps` instructions, stopping early at `halt`.
 * Writes the number executed and whether the machine has halted.
 *
 * # Safety
 * `m` must be a live handle; outputs must be valid or null.
 */
enum RtStatus rt_machine_run(struct RtMachine *m,
                             uint64_t max_steps,
                             uint64_t *out_steps,
                             bool *out_halted);

/**
 * Reads general register `index` (0..=15; 15 is the pc).
 *
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
enum RtStatus rt_machine_reg(const struct RtMachine *m, uint8_t index, uint32_t *out);

/**
 * Writes the SHA-256 of program memory into `out` (32 bytes).
 *
 * # Safety
 * `m` must be a live handle and `out` must point to 32 writable bytes.
 */
enum RtStatus rt_machine_pmem_digest(const struct RtMachine *m, uint8_t *out);

/**
 * # Safety
 * `m` must be null or a handle that has not been freed.
 */
void rt_machine_free(struct RtMachine *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RTAUDIT_H */

#ifndef EFFICIENTFORMER_H
#define EFFICIENTFORMER_H

#include <stddef.h>
#include <stdint.h>

typedef enum EfStatus {
  EF_STATUS_OK = 0,
  EF_STATUS_NULL_POINTER = 1,
  EF_STATUS_INVALID_UTF8 = 2,
  EF_STATUS_INVALID_ARGUMENT = 3,
  EF_STATUS_INVALID_ARCH = 4,
  EF_STATUS_IO = 5,
  EF_STATUS_PARSE = 6,
  EF_STATUS_LATENCY = 7,
  EF_STATUS_SEARCH = 8,
  EF_STATUS_TARGET_UNREACHABLE = 9,
  EF_STATUS_PANIC = 99,
} EfStatus;

/*
 Architecture spec handle.
 */
typedef struct EfArch EfArch;

/*
 Latency lookup table handle.
 */
typedef struct EfLut EfLut;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Owned by the library and valid until the next call on this thread.
 */
const char *ef_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ef_version(void);

/*
 Frees a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void ef_string_free(char *s);

/*
 Builds a preset (`L1`, `L3`, `L7`, `toy`).

 # Safety
 `name` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_arch_preset(const char *name, struct EfArch **out);

/*
 Parses an architecture JSON document. Structural validity is not checked.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_arch_from_json(const char *json, struct EfArch **out);

/*
 Serializes to JSON; release the string with `ef_string_free`.

 # Safety
 `arch` must be a live handle; `out` must be writable.
 */
enum EfStatus ef_arch_to_json(const struct EfArch *arch, char **out);

/*
 Writes the number of violations; returns `EF_STATUS_INVALID_ARCH` with
 the list in the error message if there are any.

 # Safety
 `arch` must be a live handle; `violations` may be null.
 */
enum EfStatus ef_arch_validate(const struct EfArch *arch, uintptr_t *violations);

/*
 Trainable parameters and per-image MACs.

 # Safety
 `arch` must be a live handle; outputs must be writable.
 */
enum EfStatus ef_arch_count(const struct EfArch *arch, uint64_t *params, uint64_t *macs);

/*
 # Safety
 `arch` must come from this library and not be freed twice. Null is ignored.
 */
void ef_arch_free(struct EfArch *arch);

/*
 Loads a latency table CSV. Fingerprint warnings are dropped.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_lut_load(const char *path, struct EfLut **out);

/*
 Deterministic synthetic table covering every key of a search skeleton.

 # Safety
 `skeleton` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_lut_synthetic(const char *skeleton, struct EfLut **out);

/*
 # Safety
 `lut` must be a live handle; `len` must be writable.
 */
enum EfStatus ef_lut_len(const struct EfLut *lut, uintptr_t *len);

/*
 Sum of table medians over the architecture's components, in seconds.

 # Safety
 `lut` and `arch` must be live handles; `seconds` must be writable.
 */
enum EfStatus ef_lut_estimate(const struct EfLut *lut, const struct EfArch *arch, double *seconds);

/*
 # Safety
 `lut` must come from this library and not be freed twice. Null is ignored.
 */
void ef_lut_free(struct EfLut *lut);

/*
 Greedy slimming of a search skeleton against `lut` with fixed per-path
 importances (`n` must equal the skeleton's MetaPath count). Stops at
 `target_frac` of the initial estimate. On success `out` holds the
 derived architecture; `EF_STATUS_TARGET_UNREACHABLE` still fills `out`
 with the smallest network reached.

 # Safety
 Pointers must be valid; `importance` must hold `n` floats.
 */
enum EfStatus ef_slim_static(const char *skeleton,
                             const struct EfLut *lut,
                             const float *importance,
                             uintptr_t n,
                             double target_frac,
                             struct EfArch **out,
                             double *final_seconds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EFFICIENTFORMER_H */

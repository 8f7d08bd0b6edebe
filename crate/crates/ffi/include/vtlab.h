#ifndef VTLAB_H
#define VTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum VtlabStatus {
  VtlabStatus_Ok = 0,
  /**
   * A pointer or size argument was null/invalid.
   */
  VtlabStatus_InvalidArgument = 1,
  /**
   * The configuration was rejected.
   */
  VtlabStatus_ConfigError = 2,
  /**
   * The operation failed at runtime.
   */
  VtlabStatus_RuntimeError = 3,
} VtlabStatus;

/**
 * Opaque model handle.
 */
typedef struct VtlabModel VtlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed.
 */
const char *vtlab_version(void);

/**
 * Copy the last error message into `buf` (truncated to `cap` bytes,
 * always NUL-terminated). Returns the full message length.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null.
 */
size_t vtlab_last_error(char *buf, size_t cap);

/**
 * Build a fresh seeded model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated UTF-8 string; `out` must be a
 * valid pointer to a handle slot.
 */
enum VtlabStatus vtlab_model_new(const char *config_json, struct VtlabModel **out);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
 */
enum VtlabStatus vtlab_model_load(const char *path, struct VtlabModel **out);

/**
 * Write the model to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle from this library; `path` a
 * NUL-terminated UTF-8 string.
 */
enum VtlabStatus vtlab_model_save(const struct VtlabModel *model, const char *path);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void vtlab_model_free(struct VtlabModel *model);

/**
 * Total scalar parameter count of the model.
 *
 * # Safety
 * `model` must be a live handle.
 */
uint64_t vtlab_model_param_count(const struct VtlabModel *model);

/**
 * Greedy-generate `n_tokens` tokens for one image + text prompt.
 *
 * `patches` is row-major `[n_patches, patch_dim]` and must match the
 * model's grid; `text_ids`/`text_len` give the prompt tokens. Exactly
 * `n_tokens` ids are written to `out_tokens`.
 *
 * # Safety
 * All pointers must reference buffers of the stated sizes.
 */
enum VtlabStatus vtlab_generate(const struct VtlabModel *model,
                                const double *patches,
                                size_t n_patches,
                                size_t patch_dim,
                                const uint32_t *text_ids,
                                size_t text_len,
                                size_t n_tokens,
                                uint32_t *out_tokens);

/**
 * Run the throughput benchmark for a JSON scenario; on success `out_json`
 * receives a serialized report (free with [`vtlab_string_free`]).
 *
 * # Safety
 * `model` must be live; `scenario_json` NUL-terminated UTF-8; `out_json`
 * a valid slot.
 */
enum VtlabStatus vtlab_bench_json(const struct VtlabModel *model,
                                  const char *scenario_json,
                                  size_t workers,
                                  uint64_t seed,
                                  char **out_json);

/**
 * Analytic prefill FLOPs for a JSON model config at `n_text` prompt
 * tokens; `out_json` receives the report.
 *
 * # Safety
 * `config_json` must be NUL-terminated UTF-8; `out_json` a valid slot.
 */
enum VtlabStatus vtlab_flops_json(const char *config_json, size_t n_text, char **out_json);

/**
 * Free a string returned by a `*_json` function. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void vtlab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTLAB_H */

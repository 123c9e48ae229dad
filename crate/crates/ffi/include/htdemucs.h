#ifndef HTDEMUCS_H
#define HTDEMUCS_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum HtdStatus {
  HTD_STATUS_OK = 0,
  HTD_STATUS_NULL_POINTER = 1,
  HTD_STATUS_INVALID_ARGUMENT = 2,
  HTD_STATUS_DIMENSION = 3,
  HTD_STATUS_DEGENERATE_ROW = 4,
  HTD_STATUS_CONTRACT = 5,
  HTD_STATUS_LENGTH = 6,
  HTD_STATUS_FORMAT = 7,
  HTD_STATUS_CORRUPTION = 8,
  HTD_STATUS_CONFIG = 9,
  HTD_STATUS_NON_FINITE = 10,
  HTD_STATUS_DATA = 11,
  HTD_STATUS_IO = 12,
  HTD_STATUS_BUFFER_TOO_SMALL = 13,
  HTD_STATUS_PANIC = 14,
} HtdStatus;

/**
 * A loaded separation model.
 */
typedef struct HtdModel HtdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *htd_version(void);

/**
 * Copies the calling thread's last failure message into `buf`.
 *
 * # Safety
 * `buf` must be null or writable for `len` bytes; `needed` must be null or
 * writable.
 */
enum HtdStatus htd_last_error(char *buf, size_t len, size_t *needed);

/**
 * Loads a weight file. On success `*out` owns a handle to release with
 * [`htd_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HtdStatus htd_model_load(const char *path, struct HtdModel **out);

/**
 * Releases a handle from [`htd_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, released at most once.
 */
void htd_model_free(struct HtdModel *model);

/**
 * Number of output sources, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t htd_model_num_sources(const struct HtdModel *model);

/**
 * Sample rate the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t htd_model_sample_rate(const struct HtdModel *model);

/**
 * Name of source `index`, NUL-terminated, into `buf`.
 *
 * # Safety
 * `model` must be a live handle; `buf` null or writable for `len` bytes;
 * `needed` null or writable.
 */
enum HtdStatus htd_model_source_name(const struct HtdModel *model,
                                     size_t index,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

/**
 * Separates a planar mixture `[channels][frames]` into
 * `[sources][channels][frames]` at `output`, using overlapping chunks of
 * `chunk_seconds` with fractional `overlap`.
 *
 * # Safety
 * `input` must hold `channels * frames` floats and `output` room for
 * `sources * channels * frames`.
 */
enum HtdStatus htd_separate(const struct HtdModel *model,
                            const float *input,
                            size_t channels,
                            size_t frames,
                            uint32_t sample_rate,
                            double chunk_seconds,
                            double overlap,
                            float *output);

/**
 * Per-second SDR in dB of planar `estimate` against `reference`, both
 * `[channels][frames]`. Writes up to `capacity` values and the chunk count
 * to `*count`.
 *
 * # Safety
 * Both inputs must hold `channels * frames` floats; `out` must be writable
 * for `capacity` doubles and `count` writable.
 */
enum HtdStatus htd_sdr_chunks(const float *reference,
                              const float *estimate,
                              size_t channels,
                              size_t frames,
                              uint32_t sample_rate,
                              bool skip_silent,
                              double *out,
                              size_t capacity,
                              size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HTDEMUCS_H */

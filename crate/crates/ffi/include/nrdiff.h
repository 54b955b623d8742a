#ifndef NRDIFF_H
#define NRDIFF_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum NrdStatus {
  NRD_STATUS_OK = 0,
  // A required pointer argument was null.
  NRD_STATUS_NULL_ARGUMENT = 1,
  NRD_STATUS_INVALID_CONFIG = 2,
  // A file or packet was malformed.
  NRD_STATUS_FORMAT = 3,
  // The packet header could not be recovered.
  NRD_STATUS_PACKET_LOST = 4,
  NRD_STATUS_OUT_OF_RANGE = 5,
  NRD_STATUS_IO = 6,
  NRD_STATUS_BUFFER_TOO_SMALL = 7,
  NRD_STATUS_DIVERGED = 8,
  // A path was not valid UTF-8.
  NRD_STATUS_INVALID_STRING = 9,
  // The library panicked; the message holds the panic text.
  NRD_STATUS_INTERNAL = 10,
} NrdStatus;

// Shared set of seed-reproducible Gaussian noise vectors.
typedef struct NrdBank NrdBank;

// Trained denoiser loaded from a checkpoint.
typedef struct NrdModel NrdModel;

// Variance schedule of the diffusion process.
typedef struct NrdSchedule NrdSchedule;

// Channel code settings. Repetition factors must be odd; 1 means uncoded.
typedef struct NrdCodec {
  uint32_t strong_repeat;
  uint32_t weak_repeat;
  bool run_length;
} NrdCodec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *nrd_version(void);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `cap` bytes. Returns the full message length without the NUL.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t nrd_last_error(char *buf, size_t cap);

// Codec used when a null codec pointer is passed: strong 5x repetition on
// header and condition, uncoded index, no run-length coding.
struct NrdCodec nrd_codec_default(void);

// Linear variance schedule with `steps` steps.
//
// # Safety
// `out` must be a valid pointer.
enum NrdStatus nrd_schedule_new(uint32_t steps,
                                double beta_start,
                                double beta_end,
                                struct NrdSchedule **out);

// Cumulative product `ᾱ_t` for `t` in `1..=steps`.
//
// # Safety
// `schedule` must come from this library; `out` must be valid.
enum NrdStatus nrd_schedule_alpha_bar(const struct NrdSchedule *schedule, uint32_t t, double *out);

// # Safety
// `schedule` must be null or come from this library, and not be used again.
void nrd_schedule_free(struct NrdSchedule *schedule);

// Builds `size` vectors of shape `channels × height × width` from `seed`.
//
// # Safety
// `out` must be a valid pointer.
enum NrdStatus nrd_bank_build(uint64_t seed,
                              size_t size,
                              size_t channels,
                              size_t height,
                              size_t width,
                              struct NrdBank **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be valid.
enum NrdStatus nrd_bank_load(const char *path, struct NrdBank **out);

// Saves the bank; with `full_vectors` false only the seed and shape are
// written and vectors are regenerated on load.
//
// # Safety
// `bank` must come from this library; `path` must be NUL-terminated.
enum NrdStatus nrd_bank_save(const struct NrdBank *bank, const char *path, bool full_vectors);

// Number of vectors.
//
// # Safety
// `bank` must come from this library; `out` must be valid.
enum NrdStatus nrd_bank_len(const struct NrdBank *bank, size_t *out);

// Copies vector `index` (length `C·H·W`).
//
// # Safety
// `out` must be null or hold `cap` floats; `out_len` must be valid.
enum NrdStatus nrd_bank_vector(const struct NrdBank *bank,
                               size_t index,
                               float *out,
                               size_t cap,
                               size_t *out_len);

// # Safety
// `bank` must be null or come from this library, and not be used again.
void nrd_bank_free(struct NrdBank *bank);

// Bank index whose step-T latent radius is closest to the Gaussian radius
// of the bank shape. `image` is `C·H·W` values in [−1, 1], channel-major.
//
// # Safety
// Handles must come from this library; `image` must hold `len` values.
enum NrdStatus nrd_select_noise(const struct NrdBank *bank,
                                const struct NrdSchedule *schedule,
                                const double *image,
                                size_t len,
                                size_t *out_index);

// Encodes an image into a packet: the semantic condition extracted from
// `labels` (one per pixel, `< num_classes`, where 0 selects the default
// class count) plus the selected bank index.
// The packet is written as bytes, MSB first, zero-padded to a byte.
//
// # Safety
// Handles must come from this library; `image` holds `image_len` values,
// `labels` holds `labels_len` bytes, `packet` holds `cap` bytes or is null.
enum NrdStatus nrd_tx(const struct NrdBank *bank,
                      const struct NrdSchedule *schedule,
                      const struct NrdCodec *codec,
                      const double *image,
                      size_t image_len,
                      const uint8_t *labels,
                      size_t labels_len,
                      uint32_t num_classes,
                      double edge_threshold,
                      uint8_t *packet,
                      size_t cap,
                      size_t *out_len,
                      size_t *out_index);

// Decodes packet bytes without regenerating, reporting the index and the
// announced bank size.
//
// # Safety
// `packet` must hold `len` bytes; output pointers must be valid or null.
enum NrdStatus nrd_packet_decode(const uint8_t *packet,
                                 size_t len,
                                 const struct NrdCodec *codec,
                                 size_t *out_index,
                                 size_t *out_bank_size);

// # Safety
// `path` must be a NUL-terminated string; `out` must be valid.
enum NrdStatus nrd_model_load(const char *path, struct NrdModel **out);

// Image shape the model was trained on.
//
// # Safety
// `model` must come from this library; output pointers must be valid.
enum NrdStatus nrd_model_shape(const struct NrdModel *model,
                               size_t *channels,
                               size_t *height,
                               size_t *width);

// New handle holding a copy of the model's schedule.
//
// # Safety
// `model` must come from this library; `out` must be valid.
enum NrdStatus nrd_model_schedule(const struct NrdModel *model, struct NrdSchedule **out);

// # Safety
// `model` must be null or come from this library, and not be used again.
void nrd_model_free(struct NrdModel *model);

// Decodes a packet and regenerates the image by reverse diffusion from the
// indexed bank vector. Writes `C·H·W` values in [−1, 1].
//
// # Safety
// Handles must come from this library; `packet` holds `len` bytes; `image`
// holds `cap` values or is null; `out_len` must be valid.
enum NrdStatus nrd_rx(const struct NrdModel *model,
                      const struct NrdBank *bank,
                      const struct NrdCodec *codec,
                      const uint8_t *packet,
                      size_t len,
                      uint64_t sampler_seed,
                      double *image,
                      size_t cap,
                      size_t *out_len,
                      size_t *out_index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NRDIFF_H */

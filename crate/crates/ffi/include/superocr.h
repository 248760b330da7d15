#ifndef SUPEROCR_H
#define SUPEROCR_H

/* Generated from the Rust sources; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every exported call.
 */
typedef enum SocrStatus {
  SOCR_STATUS_OK = 0,
  SOCR_STATUS_NULL_POINTER = 1,
  SOCR_STATUS_INVALID_ARGUMENT = 2,
  SOCR_STATUS_FORMAT = 3,
  SOCR_STATUS_SHAPE = 4,
  SOCR_STATUS_NUMERIC = 5,
  SOCR_STATUS_PROTOCOL = 6,
  SOCR_STATUS_TRANSPORT = 7,
  SOCR_STATUS_IO = 8,
  SOCR_STATUS_BUFFER_TOO_SMALL = 9,
  SOCR_STATUS_PANIC = 10,
} SocrStatus;

/**
 * An emulated coprocessor answering wire frames.
 */
typedef struct SocrDevice SocrDevice;

/**
 * A loaded model plus the decoding geometry.
 */
typedef struct SocrModel SocrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next call on the same thread.
 */
const char *socr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *socr_version(void);

/**
 * Load a float checkpoint or quantized model (detected by magic) and
 * bind it to a layout preset and alphabet by name.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SocrStatus socr_model_load(const char *path,
                                const char *layout,
                                const char *alphabet,
                                struct SocrModel **out);

/**
 * # Safety
 * `model` must come from [`socr_model_load`] and not be used afterwards.
 */
void socr_model_free(struct SocrModel *model);

/**
 * Number of characters [`socr_decode`] produces.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum SocrStatus socr_model_string_len(const struct SocrModel *model, size_t *out);

/**
 * Decode one scene (interleaved 8-bit pixels) into a UTF-8 string.
 *
 * # Safety
 * `pixels` must hold `width * height * channels` bytes; `buf` must hold
 * `cap` bytes.
 */
enum SocrStatus socr_decode(const struct SocrModel *model,
                            uint32_t width,
                            uint32_t height,
                            uint32_t channels,
                            const uint8_t *pixels,
                            char *buf,
                            size_t cap,
                            size_t *out_len);

/**
 * Watermeter reading for five class indices, e.g. `01816.5`.
 *
 * # Safety
 * `classes` must hold `count` values; `buf` must hold `cap` bytes.
 */
enum SocrStatus socr_meter_reading(const uint32_t *classes,
                                   size_t count,
                                   char *buf,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Load the device half of a quantized model.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum SocrStatus socr_device_load(const char *path, struct SocrDevice **out);

/**
 * # Safety
 * `device` must come from [`socr_device_load`] and not be used afterwards.
 */
void socr_device_free(struct SocrDevice *device);

/**
 * Answer one complete request frame with a response or error frame.
 * Request-level failures are reported inside the reply, not as a status.
 *
 * # Safety
 * `frame` must hold `len` bytes; `buf` must hold `cap` bytes.
 */
enum SocrStatus socr_device_handle_frame(const struct SocrDevice *device,
                                         const uint8_t *frame,
                                         size_t len,
                                         uint8_t *buf,
                                         size_t cap,
                                         size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPEROCR_H */

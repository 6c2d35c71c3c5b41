#ifndef INTERSEG_H
#define INTERSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum IsgStatus {
  ISG_STATUS_OK = 0,
  ISG_STATUS_NULL_POINTER = 1,
  ISG_STATUS_INVALID_ARGUMENT = 2,
  ISG_STATUS_NOT_FOUND = 3,
  ISG_STATUS_SHAPE_MISMATCH = 4,
  ISG_STATUS_INVALID_PAYLOAD = 5,
  ISG_STATUS_BUSY = 6,
  ISG_STATUS_NOT_UNDOABLE = 7,
  ISG_STATUS_UNAVAILABLE = 8,
  ISG_STATUS_DIVERGED = 9,
  ISG_STATUS_INTERNAL = 10,
  ISG_STATUS_PANIC = 11,
} IsgStatus;

typedef enum IsgRefineMode {
  ISG_REFINE_MODE_AC_ONLY = 0,
  ISG_REFINE_MODE_DISCA = 1,
} IsgRefineMode;

typedef enum IsgUncertainty {
  ISG_UNCERTAINTY_ENTROPY = 0,
  ISG_UNCERTAINTY_MC_DROPOUT = 1,
  ISG_UNCERTAINTY_ODIN = 2,
  ISG_UNCERTAINTY_CONFIDNET = 3,
} IsgUncertainty;

/**
 * A loaded checkpoint.
 */
typedef struct IsgModel IsgModel;

/**
 * One image, its click history and a private copy of the weights.
 */
typedef struct IsgSession IsgSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *isg_last_error(void);

/**
 * Library version as a static string.
 */
const char *isg_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum IsgStatus isg_model_load(const char *path, struct IsgModel **out);

/**
 * Decodes a checkpoint from memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be writable.
 */
enum IsgStatus isg_model_from_bytes(const uint8_t *bytes, size_t len, struct IsgModel **out);

/**
 * Image channels and class count the model expects.
 *
 * # Safety
 * `model` must come from `isg_model_load` or `isg_model_from_bytes`.
 */
enum IsgStatus isg_model_shape(const struct IsgModel *model,
                               size_t *image_channels,
                               size_t *classes);

/**
 * # Safety
 * `model` must be null or a live model handle; it is invalid afterwards.
 */
void isg_model_free(struct IsgModel *model);

/**
 * Opens a session on a channel-major `channels x height x width` image
 * with values in [0, 1]. `config_json` may be null for defaults; otherwise
 * it is a session config object without the two id fields.
 *
 * # Safety
 * `pixels` must hold `channels * height * width` floats; `config_json`
 * must be null or nul-terminated; `out` must be writable.
 */
enum IsgStatus isg_session_new(const struct IsgModel *model,
                               const float *pixels,
                               size_t channels,
                               size_t height,
                               size_t width,
                               const char *config_json,
                               struct IsgSession **out);

/**
 * Height, width and class count of the session image and prediction.
 *
 * # Safety
 * `session` must be a live session handle; outputs must be writable.
 */
enum IsgStatus isg_session_shape(const struct IsgSession *session,
                                 size_t *height,
                                 size_t *width,
                                 size_t *classes);

/**
 * Records a click; it takes effect at the next refine.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum IsgStatus isg_session_add_click(struct IsgSession *session,
                                     size_t row,
                                     size_t col,
                                     size_t class_id);

/**
 * Applies pending clicks, by forward pass only or by retraining first.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum IsgStatus isg_session_refine(struct IsgSession *session, enum IsgRefineMode mode);

/**
 * Writes the row-major argmax labels, `height * width` bytes.
 *
 * # Safety
 * `labels` must hold `len` writable bytes.
 */
enum IsgStatus isg_session_labels(const struct IsgSession *session, uint8_t *labels, size_t len);

/**
 * Writes a row-major per-pixel uncertainty map, `height * width` floats.
 *
 * # Safety
 * `scores` must hold `len` writable floats.
 */
enum IsgStatus isg_session_uncertainty(const struct IsgSession *session,
                                       enum IsgUncertainty method,
                                       float *scores,
                                       size_t len);

/**
 * Removes the last click, restoring the weights if it was retrained on.
 * `undone` is set to false when there was nothing to undo.
 *
 * # Safety
 * `session` must be a live session handle; `undone` may be null.
 */
enum IsgStatus isg_session_undo(struct IsgSession *session, bool *undone);

/**
 * Drops every click and restores the starting weights.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum IsgStatus isg_session_reset(struct IsgSession *session);

/**
 * Number of recorded clicks.
 *
 * # Safety
 * `session` must be a live session handle; `count` must be writable.
 */
enum IsgStatus isg_session_click_count(const struct IsgSession *session, size_t *count);

/**
 * # Safety
 * `session` must be null or a live session handle; it is invalid afterwards.
 */
void isg_session_free(struct IsgSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERSEG_H */

#ifndef S2SR_H
#define S2SR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Bumped whenever a signature or struct layout in this header changes.
#define S2SR_ABI_VERSION 1

typedef enum S2srFormat {
  S2SR_FORMAT_GEOTIFF = 0,
  S2SR_FORMAT_RAW = 1,
} S2srFormat;

typedef enum S2srStatus {
  S2SR_STATUS_OK = 0,
  S2SR_STATUS_NULL_POINTER = 1,
  S2SR_STATUS_INVALID_ARGUMENT = 2,
  S2SR_STATUS_PANIC = 3,
  S2SR_STATUS_MISSING_BAND = 10,
  S2SR_STATUS_SHAPE_MISMATCH = 11,
  S2SR_STATUS_CORRUPT_RASTER = 12,
  S2SR_STATUS_CORRUPT_CHECKPOINT = 13,
  S2SR_STATUS_IO_FAILURE = 14,
  S2SR_STATUS_BAD_FACTOR = 15,
  S2SR_STATUS_SHAPE_NOT_DIVISIBLE = 16,
  S2SR_STATUS_MISSING_LR60 = 17,
  S2SR_STATUS_PATCH_TOO_LARGE = 18,
  S2SR_STATUS_INVALID_CONFIG = 19,
  S2SR_STATUS_DOMAIN_ERROR = 20,
  S2SR_STATUS_ZERO_REFERENCE = 21,
  S2SR_STATUS_ALL_PIXELS_DEGENERATE = 22,
  S2SR_STATUS_WINDOW_TOO_LARGE = 23,
  S2SR_STATUS_UNTRAINED_PARAMS = 24,
  S2SR_STATUS_NON_FINITE_LOSS = 25,
  S2SR_STATUS_DATA_EXHAUSTED = 26,
  S2SR_STATUS_VERSION_MISMATCH = 27,
  S2SR_STATUS_JSON_ERROR = 28,
} S2srStatus;

// One band group: a `bands x rows x cols` float raster with band names.
typedef struct S2srBandGroup S2srBandGroup;

// A generator restored from a checkpoint.
typedef struct S2srModel S2srModel;

// A loaded scene (10 m, 20 m and optional 60 m groups).
typedef struct S2srScene S2srScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// ABI version of the loaded library, compare with `S2SR_ABI_VERSION`.
uint32_t s2sr_abi_version(void);

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next s2sr call on the same thread.
const char *s2sr_last_error(void);

// Stable name of a status code, e.g. `"ShapeMismatch"`. Static storage.
const char *s2sr_status_name(enum S2srStatus status);

// Loads a scene from its JSON manifest.
//
// # Safety
// `manifest_path` must be a NUL-terminated string; `out_scene` must be writable.
enum S2srStatus s2sr_scene_load(const char *manifest_path, struct S2srScene **out_scene);

// Rows and columns of the scene's 10 m grid.
//
// # Safety
// `scene` must come from `s2sr_scene_load`; the out pointers must be writable.
enum S2srStatus s2sr_scene_dims(const struct S2srScene *scene, size_t *rows, size_t *cols);

// # Safety
// `scene` must come from `s2sr_scene_load` (or be null) and not be used again.
void s2sr_scene_free(struct S2srScene *scene);

// Restores a generator from a checkpoint file.
//
// # Safety
// `checkpoint_path` must be a NUL-terminated string; `out_model` must be writable.
enum S2srStatus s2sr_model_load(const char *checkpoint_path, struct S2srModel **out_model);

// Scaling factor of the model: 2 (20 m targets) or 6 (60 m targets).
//
// # Safety
// `model` must come from `s2sr_model_load`; `factor` must be writable.
enum S2srStatus s2sr_model_factor(const struct S2srModel *model, uint32_t *factor);

// # Safety
// `model` must come from `s2sr_model_load` (or be null) and not be used again.
void s2sr_model_free(struct S2srModel *model);

// Super-resolves the model's target group of `scene` onto the 10 m grid.
// `tile` is the inference tile side in 10 m pixels (0 picks the default).
//
// # Safety
// Handles must be live; `out_group` must be writable.
enum S2srStatus s2sr_super_resolve(const struct S2srModel *model,
                                   const struct S2srScene *scene,
                                   size_t tile,
                                   struct S2srBandGroup **out_group);

// Loads a band group from a GeoTIFF (`.tif`) or raw-tensor file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_group` must be writable.
enum S2srStatus s2sr_band_group_load(const char *path, struct S2srBandGroup **out_group);

// Builds a band group from a band-major `bands x rows x cols` buffer.
//
// # Safety
// `band_names` must hold `n_bands` NUL-terminated strings and `data`
// `n_bands * rows * cols` floats; `out_group` must be writable.
enum S2srStatus s2sr_band_group_new(const char *const *band_names,
                                    size_t n_bands,
                                    size_t rows,
                                    size_t cols,
                                    const float *data,
                                    double gsd_m,
                                    struct S2srBandGroup **out_group);

// Number of bands, rows and columns.
//
// # Safety
// `group` must be live; the out pointers must be writable.
enum S2srStatus s2sr_band_group_shape(const struct S2srBandGroup *group,
                                      size_t *bands,
                                      size_t *rows,
                                      size_t *cols);

// Name of band `index` as a newly allocated string; free it with
// `s2sr_string_free`.
//
// # Safety
// `group` must be live; `out_name` must be writable.
enum S2srStatus s2sr_band_group_band_name(const struct S2srBandGroup *group,
                                          size_t index,
                                          char **out_name);

// Copies the pixels, band-major, into `buf` of `len` floats.
//
// # Safety
// `buf` must be writable for `len` floats.
enum S2srStatus s2sr_band_group_copy_pixels(const struct S2srBandGroup *group,
                                            float *buf,
                                            size_t len);

// Writes the group to `path` in the given format.
//
// # Safety
// `group` must be live; `path` must be a NUL-terminated string.
enum S2srStatus s2sr_band_group_save(const struct S2srBandGroup *group,
                                     const char *path,
                                     enum S2srFormat format);

// # Safety
// `group` must be live (or null) and not be used again.
void s2sr_band_group_free(struct S2srBandGroup *group);

// Scores `sr` against `gt` (RMSE, SRE, SAM, UIQ) and returns the report as
// a JSON string; free it with `s2sr_string_free`. `uiq_window` 0 picks the
// default window.
//
// # Safety
// Handles must be live; `out_json` must be writable.
enum S2srStatus s2sr_evaluate_json(const struct S2srBandGroup *sr,
                                   const struct S2srBandGroup *gt,
                                   size_t uiq_window,
                                   char **out_json);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from an s2sr call (or be null) and not be used again.
void s2sr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S2SR_H */

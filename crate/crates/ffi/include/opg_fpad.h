#ifndef OPG_FPAD_H
#define OPG_FPAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum OpgStatus {
  OPG_STATUS_OK = 0,
  OPG_STATUS_NULL_ARGUMENT = 1,
  OPG_STATUS_INVALID_STRING = 2,
  OPG_STATUS_IO = 3,
  OPG_STATUS_DECODE = 4,
  OPG_STATUS_CONFIG = 5,
  OPG_STATUS_PROTOCOL = 6,
  OPG_STATUS_PARSE = 7,
  OPG_STATUS_CHECKPOINT = 8,
  OPG_STATUS_NO_MINUTIAE = 9,
  OPG_STATUS_NUMERIC = 10,
  OPG_STATUS_BUFFER_TOO_SMALL = 11,
  OPG_STATUS_OUT_OF_RANGE = 12,
  OPG_STATUS_INTERNAL = 13,
} OpgStatus;

/*
 Run configuration.
 */
typedef struct OpgConfig OpgConfig;

/*
 Nine section patch generators.
 */
typedef struct OpgGenerator OpgGenerator;

/*
 Dataset manifest.
 */
typedef struct OpgManifest OpgManifest;

/*
 Nine trained section classifiers for one sensor.
 */
typedef struct OpgModel OpgModel;

/*
 Evaluation report of one protocol run.
 */
typedef struct OpgReport OpgReport;

/*
 Summary metrics in percent; NaN marks an absent rate.
 */
typedef struct OpgMetrics {
  double apcer;
  double bpcer;
  double ace;
  double accuracy;
  double apcer_known;
  double apcer_unknown;
  uintptr_t n_live;
  uintptr_t n_spoof;
  uintptr_t n_no_minutiae;
} OpgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next call on the same thread.
 */
const char *opg_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *opg_version(void);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer to writable storage for a handle.
 */
enum OpgStatus opg_config_default(struct OpgConfig **out);

/*
 Configuration from a JSON file; missing keys keep their defaults.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum OpgStatus opg_config_load(const char *path_, struct OpgConfig **out);

/*
 Configuration from a JSON string; missing keys keep their defaults.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum OpgStatus opg_config_from_json(const char *json, struct OpgConfig **out);

/*
 # Safety
 `cfg` must be null or a handle from this library not yet freed.
 */
void opg_config_free(struct OpgConfig *cfg);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum OpgStatus opg_manifest_load(const char *path_, struct OpgManifest **out);

/*
 Write a synthetic multi-sensor dataset under `out_dir` and return its
 manifest.

 # Safety
 `out_dir` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum OpgStatus opg_fixture_create(uint64_t seed,
                                  uintptr_t sensors,
                                  uintptr_t per_class,
                                  const char *out_dir,
                                  struct OpgManifest **out);

/*
 # Safety
 `m` must be a live manifest handle and `out` writable.
 */
enum OpgStatus opg_manifest_sensor_count(const struct OpgManifest *m, uintptr_t *out);

/*
 Copy sensor `index`'s name into `buf` as a NUL-terminated string.
 `required` receives the buffer size needed, terminator included.

 # Safety
 `m` must be a live manifest handle; `buf` must hold `capacity` bytes
 (it may be null when `capacity` is 0); `required` may be null.
 */
enum OpgStatus opg_manifest_sensor_name(const struct OpgManifest *m,
                                        uintptr_t index,
                                        char *buf,
                                        uintptr_t capacity,
                                        uintptr_t *required);

/*
 # Safety
 `m` must be null or a handle from this library not yet freed.
 */
void opg_manifest_free(struct OpgManifest *m);

/*
 Train and test on one sensor. When `out_dir` is not null, models and
 reports are written under it.

 # Safety
 Handles must be live, `sensor` NUL-terminated, `out_dir` null or
 NUL-terminated, and `out` a valid handle slot.
 */
enum OpgStatus opg_run_intra_sensor(const struct OpgManifest *m,
                                    const char *sensor,
                                    const struct OpgConfig *cfg,
                                    bool use_opg,
                                    const char *out_dir,
                                    struct OpgReport **out);

/*
 Train on one sensor and test on another.

 # Safety
 As for [`opg_run_intra_sensor`].
 */
enum OpgStatus opg_run_cross_sensor(const struct OpgManifest *m,
                                    const char *train_sensor,
                                    const char *test_sensor,
                                    const struct OpgConfig *cfg,
                                    bool use_opg,
                                    const char *out_dir,
                                    struct OpgReport **out);

/*
 # Safety
 `r` must be a live report handle and `out` writable.
 */
enum OpgStatus opg_report_metrics(const struct OpgReport *r, struct OpgMetrics *out);

/*
 Number of scored test samples in the report.

 # Safety
 `r` must be a live report handle and `out` writable.
 */
enum OpgStatus opg_report_sample_count(const struct OpgReport *r, uintptr_t *out);

/*
 Score and ground truth of sample `index`: `score` is NaN when the image
 had no usable minutiae; `is_live` is the true label.

 # Safety
 `r` must be a live report handle; `score` and `is_live` writable.
 */
enum OpgStatus opg_report_sample(const struct OpgReport *r,
                                 uintptr_t index,
                                 double *score,
                                 bool *is_live);

/*
 # Safety
 `r` must be null or a handle from this library not yet freed.
 */
void opg_report_free(struct OpgReport *r);

/*
 Load the section classifiers a run saved for `sensor` under `dir`.

 # Safety
 `dir` and `sensor` must be NUL-terminated, `cfg` live, `out` a valid
 handle slot.
 */
enum OpgStatus opg_model_load(const char *dir,
                              const char *sensor,
                              const struct OpgConfig *cfg,
                              struct OpgModel **out);

/*
 Fused liveness score of an image file. `score` is NaN when no patch
 reached a trained section; such an image counts as spoof.

 # Safety
 `model` must be live, `image_path` NUL-terminated, `score` writable.
 */
enum OpgStatus opg_model_score_image(const struct OpgModel *model,
                                     const char *image_path,
                                     double *score);

/*
 Decision threshold the model was trained with.

 # Safety
 `model` must be live and `out` writable.
 */
enum OpgStatus opg_model_threshold(const struct OpgModel *model, double *out);

/*
 # Safety
 `model` must be null or a handle from this library not yet freed.
 */
void opg_model_free(struct OpgModel *model);

/*
 Load a generator bundle directory.

 # Safety
 `dir` must be NUL-terminated and `out` a valid handle slot.
 */
enum OpgStatus opg_generator_load(const char *dir, struct OpgGenerator **out);

/*
 Side length of the square patches the bundle generates.

 # Safety
 `g` must be live and `out` writable.
 */
enum OpgStatus opg_generator_patch_size(const struct OpgGenerator *g, uintptr_t *out);

/*
 Draw `count` patches of `section`, row-major in `[-1, 1]`, into
 `values`, which must hold `count * patch_size * patch_size` floats.

 # Safety
 `g` must be live and `values` must point to `capacity` writable floats.
 */
enum OpgStatus opg_generator_sample(const struct OpgGenerator *g,
                                    uintptr_t section,
                                    uintptr_t count,
                                    uint64_t seed,
                                    float *values,
                                    uintptr_t capacity);

/*
 # Safety
 `g` must be null or a handle from this library not yet freed.
 */
void opg_generator_free(struct OpgGenerator *g);

/*
 Mean of `len` patch scores.

 # Safety
 `scores` must point to `len` readable doubles; `out` writable.
 */
enum OpgStatus opg_fuse_scores(const double *scores, uintptr_t len, double *out);

/*
 `(apcer + bpcer) / 2`.
 */
double opg_ace(double apcer, double bpcer);

/*
 `100 - ace`.
 */
double opg_accuracy_from_ace(double ace);

/*
 True when `score` is strictly above `threshold`.
 */
bool opg_is_live(double score, double threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPG_FPAD_H */

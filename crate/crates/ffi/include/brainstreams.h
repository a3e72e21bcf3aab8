#ifndef BRAINSTREAMS_H
#define BRAINSTREAMS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define BS_GUIDANCE_HIGH 1

#define BS_GUIDANCE_MID 2

#define BS_GUIDANCE_LOW 4

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_INVALID_ARGUMENT = 2,
  BS_STATUS_VALIDATION = 3,
  BS_STATUS_IO = 4,
  BS_STATUS_RUNTIME = 5,
  BS_STATUS_PANIC = 6,
} BsStatus;

typedef enum BsStream {
  BS_STREAM_HIGH = 0,
  BS_STREAM_MID = 1,
  BS_STREAM_LOW = 2,
} BsStream;

// Opaque handle to a loaded experiment.
typedef struct BsExperiment BsExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bs_version(void);

// Message of the last failed call on this thread, or NULL. Valid until
// the next library call on the same thread.
const char *bs_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void bs_string_free(char *s);

// Writes a synthetic dataset with default settings to `out_dir`.
//
// # Safety
// `out_dir` must be a valid NUL-terminated string.
enum BsStatus bs_synth(const char *out_dir, uint64_t seed);

// Loads the TOML config at `config_path` and its dataset.
//
// # Safety
// `config_path` must be a valid NUL-terminated string and `out` a valid
// pointer. On success `*out` owns a handle for `bs_experiment_free`.
enum BsStatus bs_experiment_open(const char *config_path, struct BsExperiment **out);

// # Safety
// `exp` must be NULL or a handle from `bs_experiment_open`, not yet freed.
void bs_experiment_free(struct BsExperiment *exp);

// Trains one stream, writes its checkpoint and stores the validation
// loss in `*out_val_loss` (which may be NULL).
//
// # Safety
// `exp` must be a live handle; `out_val_loss` NULL or valid.
enum BsStatus bs_experiment_train(const struct BsExperiment *exp,
                                  enum BsStream stream,
                                  double *out_val_loss);

// Reconstructs the test split with the guidance levels in `flags`, a
// bitwise OR of `BS_GUIDANCE_*`, and writes the images to the output
// directory. `*out_count` receives the number of reconstructions.
//
// # Safety
// `exp` must be a live handle; `out_count` NULL or valid.
enum BsStatus bs_experiment_infer(const struct BsExperiment *exp,
                                  uint32_t flags,
                                  uintptr_t *out_count);

// Runs the guidance ablation and returns the rows as a JSON array in
// `*out_json`, to be released with `bs_string_free`.
//
// # Safety
// `exp` must be a live handle and `out_json` a valid pointer.
enum BsStatus bs_experiment_ablate(const struct BsExperiment *exp, char **out_json);

// Pearson correlation of two `height × width × channels` HWC images.
//
// # Safety
// `recon` and `gt` must each point to `height * width * channels`
// readable doubles; `out` must be valid.
enum BsStatus bs_pixcorr(const double *recon,
                         const double *gt,
                         uintptr_t height,
                         uintptr_t width,
                         uintptr_t channels,
                         double *out);

// Mean SSIM (11-tap Gaussian window, σ 1.5, data range 1) of two images
// at their native resolution, on grayscale.
//
// # Safety
// As for `bs_pixcorr`.
enum BsStatus bs_ssim(const double *recon,
                      const double *gt,
                      uintptr_t height,
                      uintptr_t width,
                      uintptr_t channels,
                      double *out);

// Two-way identification percentage for `n` aligned rows of width `dim`.
//
// # Safety
// `recon` and `gt` must each point to `n * dim` readable doubles; `out`
// must be valid.
enum BsStatus bs_two_way_identification(const double *recon,
                                        const double *gt,
                                        uintptr_t n,
                                        uintptr_t dim,
                                        double *out);

// Mean correlation distance between `n` aligned rows of width `dim`.
//
// # Safety
// As for `bs_two_way_identification`.
enum BsStatus bs_feature_distance(const double *recon,
                                  const double *gt,
                                  uintptr_t n,
                                  uintptr_t dim,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAINSTREAMS_H */

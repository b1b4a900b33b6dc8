#ifndef ADVLAB_H
#define ADVLAB_H

/* Generated by cbindgen from advlab-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every API function.
typedef enum AdvlabStatus {
  ADVLAB_STATUS_OK = 0,
  // A required pointer argument was null.
  ADVLAB_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  ADVLAB_STATUS_INVALID_UTF8 = 2,
  // Arguments violated a documented precondition.
  ADVLAB_STATUS_INVALID_ARGUMENT = 3,
  // Filesystem failure.
  ADVLAB_STATUS_IO_ERROR = 4,
  // A referenced file, class or architecture does not exist.
  ADVLAB_STATUS_NOT_FOUND = 5,
  // Any other internal failure; see `advlab_last_error`.
  ADVLAB_STATUS_INTERNAL = 6,
} AdvlabStatus;

// Opaque labeled image set.
typedef struct AdvlabDataset AdvlabDataset;

// Opaque classifier handle: an architecture plus its parameters.
typedef struct AdvlabModel AdvlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next API call from the same thread.
const char *advlab_last_error(void);

// Library version as a static string.
const char *advlab_version(void);

// Free a string returned by this library.
//
// # Safety
// `s` must have been returned by an advlab function and not freed before.
void advlab_string_free(char *s);

// Generate the seeded synthetic blob dataset.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum AdvlabStatus advlab_dataset_synth(uint32_t classes,
                                       uint32_t per_class,
                                       uint32_t size,
                                       uint64_t seed,
                                       struct AdvlabDataset **out);

// Load a folder container (`index.csv` plus PGM/PPM files).
//
// # Safety
// `root` must be a valid C string; `out` must be writable.
enum AdvlabStatus advlab_dataset_load_folder(const char *root, struct AdvlabDataset **out);

// Export a dataset as a folder container.
//
// # Safety
// `ds` must be a live dataset handle; `root` a valid C string.
enum AdvlabStatus advlab_dataset_save_folder(const struct AdvlabDataset *ds, const char *root);

// Number of examples.
//
// # Safety
// `ds` must be live; `out` writable.
enum AdvlabStatus advlab_dataset_len(const struct AdvlabDataset *ds, uintptr_t *out);

// Destroy a dataset handle.
//
// # Safety
// `ds` must come from this library and not be freed twice.
void advlab_dataset_free(struct AdvlabDataset *ds);

// Build a freshly initialized model from an architecture id such as
// `smallcnn:1x32x32:3` or `mlp:1x32x32:64:3`.
//
// # Safety
// `arch_id` must be a valid C string; `out` writable.
enum AdvlabStatus advlab_model_build(const char *arch_id, uint64_t seed, struct AdvlabModel **out);

// Load a model from a checkpoint file.
//
// # Safety
// `path` must be a valid C string; `out` writable.
enum AdvlabStatus advlab_model_load(const char *path, struct AdvlabModel **out);

// Save a model checkpoint.
//
// # Safety
// `model` must be live; `path` a valid C string.
enum AdvlabStatus advlab_model_save(const struct AdvlabModel *model, const char *path);

// Architecture id of a model; free with [`advlab_string_free`].
//
// # Safety
// `model` must be live; `out` writable.
enum AdvlabStatus advlab_model_arch_id(const struct AdvlabModel *model, char **out);

// Destroy a model handle.
//
// # Safety
// `model` must come from this library and not be freed twice.
void advlab_model_free(struct AdvlabModel *model);

// Classify one image given as row-major channel-plane pixels in [0, 1].
// `len` must equal channels * height * width of the model input.
//
// # Safety
// `pixels` must point to `len` readable doubles; `out_label` writable.
enum AdvlabStatus advlab_predict(const struct AdvlabModel *model,
                                 const double *pixels,
                                 uintptr_t len,
                                 uint32_t *out_label);

// Fraction of dataset examples the model classifies correctly.
//
// # Safety
// `model` and `ds` must be live handles; `out` writable.
enum AdvlabStatus advlab_accuracy(const struct AdvlabModel *model,
                                  const struct AdvlabDataset *ds,
                                  double *out);

// Craft an adversarial copy of a dataset with a named attack
// ("FGSM", "10-IFGSM", "20-PGD", ...), pixels clamped to [0, 1].
// `out_flip_rate` (optional) receives the fraction of changed predictions.
//
// # Safety
// `model` and `ds` must be live; `attack_name` a valid C string; `out`
// writable; `out_flip_rate` writable or null.
enum AdvlabStatus advlab_attack_dataset(const struct AdvlabModel *model,
                                        const struct AdvlabDataset *ds,
                                        const char *attack_name,
                                        double epsilon,
                                        double step,
                                        uint64_t seed,
                                        struct AdvlabDataset **out,
                                        double *out_flip_rate);

// Train the model in place. `config_text` uses the same `section.key =
// value` format as the CLI config files (only the `train.*` keys matter
// here); pass an empty string for the protocol defaults. Validation data
// is optional (may be null) and drives early stopping.
//
// # Safety
// `model` must be a live mutable handle, `train` a live dataset handle,
// `val` live or null, `config_text` a valid C string.
enum AdvlabStatus advlab_train(struct AdvlabModel *model,
                               const struct AdvlabDataset *train,
                               const struct AdvlabDataset *val,
                               const char *config_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVLAB_H */

#ifndef IDT_H
#define IDT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum IdtStatus {
  IDT_STATUS_OK = 0,
  /**
   * A required pointer was null or a length was inconsistent.
   */
  IDT_STATUS_INVALID_ARGUMENT = 1,
  IDT_STATUS_INVALID_CONFIG = 2,
  /**
   * Sampling, propagating-cone or brightfield violation.
   */
  IDT_STATUS_OPTICS = 3,
  IDT_STATUS_PATTERN = 4,
  IDT_STATUS_SHAPE_MISMATCH = 5,
  /**
   * Dataset, background or LED alignment problem.
   */
  IDT_STATUS_DATA = 6,
  IDT_STATUS_REGULARIZATION = 7,
  IDT_STATUS_PHANTOM = 8,
  IDT_STATUS_IO = 9,
  /**
   * Caller buffer too small.
   */
  IDT_STATUS_BUFFER_TOO_SMALL = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  IDT_STATUS_INTERNAL = 11,
} IdtStatus;

/**
 * Optical configuration.
 */
typedef struct IdtConfig IdtConfig;

/**
 * Intensity images with their illumination and configuration.
 */
typedef struct IdtDataset IdtDataset;

/**
 * Ordered set of LED plane waves.
 */
typedef struct IdtIllumination IdtIllumination;

/**
 * Phase and absorption slices.
 */
typedef struct IdtRecon IdtRecon;

/**
 * Complex permittivity-contrast slices.
 */
typedef struct IdtVolume IdtVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 */
size_t idt_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated library version.
 */
const char *idt_version(void);

enum IdtStatus idt_config_new(double wavelength_um,
                              double na,
                              double medium_index,
                              size_t ny,
                              size_t nx,
                              double dy,
                              double dx,
                              struct IdtConfig **out);

/**
 * Parses an `OpticalConfig` JSON document.
 */
enum IdtStatus idt_config_from_json(const char *json, struct IdtConfig **out);

void idt_config_free(struct IdtConfig *cfg);

/**
 * Every LED of the default array inside the brightfield cone.
 */
enum IdtStatus idt_illumination_brightfield(const struct IdtConfig *cfg,
                                            struct IdtIllumination **out);

/**
 * Number of LEDs; 0 for a null handle.
 */
size_t idt_illumination_len(const struct IdtIllumination *illum);

void idt_illumination_free(struct IdtIllumination *illum);

/**
 * Builds a volume from real and imaginary buffers of `n_slices * ny * nx` values.
 */
enum IdtStatus idt_volume_new(const double *re,
                              const double *im,
                              size_t n_slices,
                              size_t ny,
                              size_t nx,
                              const double *slice_z,
                              double dz,
                              struct IdtVolume **out);

/**
 * Seeded random spheres on the grid of `cfg`.
 */
enum IdtStatus idt_volume_beads(const struct IdtConfig *cfg,
                                size_t count,
                                double radius_um,
                                double contrast_re,
                                double contrast_im,
                                uint64_t seed,
                                const double *slice_z,
                                size_t n_slices,
                                double dz,
                                struct IdtVolume **out);

void idt_volume_free(struct IdtVolume *vol);

/**
 * Born intensity images; `keep_scattered` adds the `|psi_s|^2` term.
 */
enum IdtStatus idt_simulate_born(const struct IdtVolume *vol,
                                 const struct IdtIllumination *illum,
                                 const struct IdtConfig *cfg,
                                 bool keep_scattered,
                                 struct IdtDataset **out);

/**
 * Number of images; 0 for a null handle.
 */
size_t idt_dataset_len(const struct IdtDataset *ds);

/**
 * Copies image `l` into `buf` (`ny * nx` values).
 */
enum IdtStatus idt_dataset_image(const struct IdtDataset *ds, size_t l, double *buf, size_t len);

void idt_dataset_free(struct IdtDataset *ds);

/**
 * Slice-wise reconstruction at `slice_z`. `alpha` and `beta` are multiples of
 * `max_u (a_rr + a_ii)`; pass 0 for both to use the default.
 */
enum IdtStatus idt_reconstruct(const struct IdtDataset *ds,
                               const double *slice_z,
                               size_t n_slices,
                               double dz,
                               double alpha,
                               double beta,
                               struct IdtRecon **out);

/**
 * Writes the reconstruction shape; any pointer may be null.
 */
enum IdtStatus idt_recon_dims(const struct IdtRecon *recon,
                              size_t *n_slices,
                              size_t *ny,
                              size_t *nx);

/**
 * Copies the phase (real contrast) slices, `n_slices * ny * nx` values.
 */
enum IdtStatus idt_recon_phase(const struct IdtRecon *recon, double *buf, size_t len);

/**
 * Copies the absorption (imaginary contrast) slices.
 */
enum IdtStatus idt_recon_absorption(const struct IdtRecon *recon, double *buf, size_t len);

/**
 * Converts phase slice `slice_index` to a height map (um) for pattern index `n_ph`.
 */
enum IdtStatus idt_recon_height_map(const struct IdtRecon *recon,
                                    size_t slice_index,
                                    double n_ph,
                                    double *buf,
                                    size_t len);

void idt_recon_free(struct IdtRecon *recon);

/**
 * Phase slice `m` of a volume handle, for callers comparing against truth.
 */
enum IdtStatus idt_volume_real_slice(const struct IdtVolume *vol,
                                     size_t m,
                                     double *buf,
                                     size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDT_H */

//! C ABI over `idt-core`.
//!
//! Objects cross the boundary as opaque handles created by `idt_*_new`-style
//! functions and released with the matching `idt_*_free`. Every fallible call
//! returns an [`IdtStatus`]; the message of the last failure on the calling
//! thread is available through [`idt_last_error_message`].
//!
//! Arrays are row-major `double` buffers: volumes and reconstructions are
//! `(n_slices, ny, nx)`, images `(ny, nx)`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use idt_core::forward::{simulate_intensity_born, IntensityDataset, PermittivityVolume};
use idt_core::phantom::{make_beads, VolumeLayout};
use idt_core::recon::{reconstruct, ReconParams, ReconstructionVolume, Regularization};
use idt_core::{select_brightfield, FrequencyGrid, IdtError, IlluminationSet, LedArray, OpticalConfig, Pupil};
use ndarray::{Array3, Axis};
use num_complex::Complex64;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdtStatus {
    Ok = 0,
    /// A required pointer was null or a length was inconsistent.
    InvalidArgument = 1,
    InvalidConfig = 2,
    /// Sampling, propagating-cone or brightfield violation.
    Optics = 3,
    Pattern = 4,
    ShapeMismatch = 5,
    /// Dataset, background or LED alignment problem.
    Data = 6,
    Regularization = 7,
    Phantom = 8,
    Io = 9,
    /// Caller buffer too small.
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Internal = 11,
}

impl From<&IdtError> for IdtStatus {
    fn from(e: &IdtError) -> Self {
        match e {
            IdtError::InvalidConfig(_) | IdtError::NonUniformSlices { .. } | IdtError::MemoryBudget { .. } => {
                IdtStatus::InvalidConfig
            }
            IdtError::Nyquist { .. }
            | IdtError::OutsidePropagatingCone { .. }
            | IdtError::NotBrightfield { .. }
            | IdtError::EmptyIllumination { .. } => IdtStatus::Optics,
            IdtError::RingShortage { .. } | IdtError::QuadrantShortage { .. } | IdtError::InvalidPattern(_) => {
                IdtStatus::Pattern
            }
            IdtError::ShapeMismatch(_) => IdtStatus::ShapeMismatch,
            IdtError::NonPositiveBackground { .. }
            | IdtError::MisalignedLeds { .. }
            | IdtError::ImaginaryResidual { .. } => IdtStatus::Data,
            IdtError::Regularization { .. } => IdtStatus::Regularization,
            IdtError::Phantom(_) => IdtStatus::Phantom,
            IdtError::Container { .. } | IdtError::Io(_) | IdtError::Json(_) | IdtError::Image(_) => IdtStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: IdtStatus, msg: impl Into<String>) -> IdtStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording errors and catching panics.
fn guard(f: impl FnOnce() -> Result<(), IdtStatus>) -> IdtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdtStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(IdtStatus::Internal, msg)
        }
    }
}

fn core<T>(r: idt_core::Result<T>) -> Result<T, IdtStatus> {
    r.map_err(|e| fail(IdtStatus::from(&e), e.to_string()))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, IdtStatus> {
    p.as_ref()
        .ok_or_else(|| fail(IdtStatus::InvalidArgument, format!("{name} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T, name: &str) -> Result<&'a mut *mut T, IdtStatus> {
    let slot = p
        .as_mut()
        .ok_or_else(|| fail(IdtStatus::InvalidArgument, format!("{name} is null")))?;
    *slot = ptr::null_mut();
    Ok(slot)
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], IdtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(IdtStatus::InvalidArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), IdtStatus> {
    if len < src.len() {
        return Err(fail(
            IdtStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if dst.is_null() {
        return Err(fail(IdtStatus::InvalidArgument, "output buffer is null"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn boxed<T>(slot: &mut *mut T, value: T) {
    *slot = Box::into_raw(Box::new(value));
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Optical configuration.
pub struct IdtConfig(OpticalConfig);
/// Ordered set of LED plane waves.
pub struct IdtIllumination(IlluminationSet);
/// Complex permittivity-contrast slices.
pub struct IdtVolume(PermittivityVolume);
/// Intensity images with their illumination and configuration.
pub struct IdtDataset(IntensityDataset);
/// Phase and absorption slices.
pub struct IdtRecon(ReconstructionVolume);

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn idt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated library version.
#[no_mangle]
pub extern "C" fn idt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn idt_config_new(
    wavelength_um: f64,
    na: f64,
    medium_index: f64,
    ny: usize,
    nx: usize,
    dy: f64,
    dx: f64,
    out: *mut *mut IdtConfig,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let cfg = core(OpticalConfig::new(wavelength_um, na, medium_index, (ny, nx), (dy, dx)))?;
        boxed(slot, IdtConfig(cfg));
        Ok(())
    })
}

/// Parses an `OpticalConfig` JSON document.
#[no_mangle]
pub unsafe extern "C" fn idt_config_from_json(json: *const c_char, out: *mut *mut IdtConfig) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let text = handle(json, "json")?;
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|e| fail(IdtStatus::InvalidArgument, e.to_string()))?;
        let cfg: OpticalConfig =
            serde_json::from_str(text).map_err(|e| fail(IdtStatus::InvalidConfig, e.to_string()))?;
        boxed(slot, IdtConfig(cfg));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn idt_config_free(cfg: *mut IdtConfig) {
    free(cfg)
}

/// Every LED of the default array inside the brightfield cone.
#[no_mangle]
pub unsafe extern "C" fn idt_illumination_brightfield(
    cfg: *const IdtConfig,
    out: *mut *mut IdtIllumination,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let cfg = handle(cfg, "cfg")?;
        let set = core(select_brightfield(&LedArray::default(), &cfg.0))?;
        boxed(slot, IdtIllumination(set));
        Ok(())
    })
}

/// Number of LEDs; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn idt_illumination_len(illum: *const IdtIllumination) -> usize {
    illum.as_ref().map_or(0, |i| i.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn idt_illumination_free(illum: *mut IdtIllumination) {
    free(illum)
}

/// Builds a volume from real and imaginary buffers of `n_slices * ny * nx` values.
#[no_mangle]
pub unsafe extern "C" fn idt_volume_new(
    re: *const f64,
    im: *const f64,
    n_slices: usize,
    ny: usize,
    nx: usize,
    slice_z: *const f64,
    dz: f64,
    out: *mut *mut IdtVolume,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let n = n_slices * ny * nx;
        let (re, im) = (slice_in(re, n, "re")?, slice_in(im, n, "im")?);
        let z = slice_in(slice_z, n_slices, "slice_z")?.to_vec();
        let data: Vec<Complex64> = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let arr = Array3::from_shape_vec((n_slices, ny, nx), data)
            .map_err(|e| fail(IdtStatus::ShapeMismatch, e.to_string()))?;
        boxed(slot, IdtVolume(core(PermittivityVolume::new(arr, z, dz))?));
        Ok(())
    })
}

/// Seeded random spheres on the grid of `cfg`.
#[no_mangle]
pub unsafe extern "C" fn idt_volume_beads(
    cfg: *const IdtConfig,
    count: usize,
    radius_um: f64,
    contrast_re: f64,
    contrast_im: f64,
    seed: u64,
    slice_z: *const f64,
    n_slices: usize,
    dz: f64,
    out: *mut *mut IdtVolume,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let cfg = handle(cfg, "cfg")?;
        let layout = core(VolumeLayout::new(slice_in(slice_z, n_slices, "slice_z")?.to_vec(), dz))?;
        let contrast = Complex64::new(contrast_re, contrast_im);
        let vol = core(make_beads(count, radius_um, contrast, seed, false, &cfg.0, &layout))?;
        boxed(slot, IdtVolume(vol));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn idt_volume_free(vol: *mut IdtVolume) {
    free(vol)
}

/// Born intensity images; `keep_scattered` adds the `|psi_s|^2` term.
#[no_mangle]
pub unsafe extern "C" fn idt_simulate_born(
    vol: *const IdtVolume,
    illum: *const IdtIllumination,
    cfg: *const IdtConfig,
    keep_scattered: bool,
    out: *mut *mut IdtDataset,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let (vol, illum, cfg) = (handle(vol, "vol")?, handle(illum, "illum")?, handle(cfg, "cfg")?);
        let (grid, pupil) = (FrequencyGrid::new(&cfg.0), Pupil::ideal(&cfg.0));
        let ds = core(simulate_intensity_born(
            &vol.0,
            &illum.0,
            &pupil,
            &grid,
            &cfg.0,
            keep_scattered,
        ))?;
        boxed(slot, IdtDataset(ds));
        Ok(())
    })
}

/// Number of images; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn idt_dataset_len(ds: *const IdtDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Copies image `l` into `buf` (`ny * nx` values).
#[no_mangle]
pub unsafe extern "C" fn idt_dataset_image(ds: *const IdtDataset, l: usize, buf: *mut f64, len: usize) -> IdtStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let img =
            ds.0.images()
                .get(l)
                .ok_or_else(|| fail(IdtStatus::InvalidArgument, format!("image {l} out of range")))?;
        copy_out(img.as_slice().expect("standard layout"), buf, len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn idt_dataset_free(ds: *mut IdtDataset) {
    free(ds)
}

/// Slice-wise reconstruction at `slice_z`. `alpha` and `beta` are multiples of
/// `max_u (a_rr + a_ii)`; pass 0 for both to use the default.
#[no_mangle]
pub unsafe extern "C" fn idt_reconstruct(
    ds: *const IdtDataset,
    slice_z: *const f64,
    n_slices: usize,
    dz: f64,
    alpha: f64,
    beta: f64,
    out: *mut *mut IdtRecon,
) -> IdtStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let ds = handle(ds, "ds")?;
        let z = slice_in(slice_z, n_slices, "slice_z")?.to_vec();
        let mut params = core(ReconParams::new(z, dz))?;
        if alpha != 0.0 || beta != 0.0 {
            params = params.with_regularization(Regularization::RelativeToTotal { alpha, beta });
        }
        let pupil = Pupil::ideal(ds.0.config());
        boxed(slot, IdtRecon(core(reconstruct(&ds.0, &pupil, &params))?));
        Ok(())
    })
}

/// Writes the reconstruction shape; any pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn idt_recon_dims(
    recon: *const IdtRecon,
    n_slices: *mut usize,
    ny: *mut usize,
    nx: *mut usize,
) -> IdtStatus {
    guard(|| {
        let r = handle(recon, "recon")?;
        let (m, y, x) = r.0.phase.dim();
        for (p, v) in [(n_slices, m), (ny, y), (nx, x)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

fn recon_copy(recon: *const IdtRecon, buf: *mut f64, len: usize, phase: bool) -> IdtStatus {
    guard(|| unsafe {
        let r = handle(recon, "recon")?;
        let a = if phase { &r.0.phase } else { &r.0.absorption };
        copy_out(a.as_slice().expect("standard layout"), buf, len)
    })
}

/// Copies the phase (real contrast) slices, `n_slices * ny * nx` values.
#[no_mangle]
pub unsafe extern "C" fn idt_recon_phase(recon: *const IdtRecon, buf: *mut f64, len: usize) -> IdtStatus {
    recon_copy(recon, buf, len, true)
}

/// Copies the absorption (imaginary contrast) slices.
#[no_mangle]
pub unsafe extern "C" fn idt_recon_absorption(recon: *const IdtRecon, buf: *mut f64, len: usize) -> IdtStatus {
    recon_copy(recon, buf, len, false)
}

/// Converts phase slice `slice_index` to a height map (um) for pattern index `n_ph`.
#[no_mangle]
pub unsafe extern "C" fn idt_recon_height_map(
    recon: *const IdtRecon,
    slice_index: usize,
    n_ph: f64,
    buf: *mut f64,
    len: usize,
) -> IdtStatus {
    guard(|| {
        let r = handle(recon, "recon")?;
        let h = core(idt_core::recon::height_map(&r.0, slice_index, n_ph, r.0.dz))?;
        copy_out(h.as_slice().expect("standard layout"), buf, len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn idt_recon_free(recon: *mut IdtRecon) {
    free(recon)
}

/// Phase slice `m` of a volume handle, for callers comparing against truth.
#[no_mangle]
pub unsafe extern "C" fn idt_volume_real_slice(
    vol: *const IdtVolume,
    m: usize,
    buf: *mut f64,
    len: usize,
) -> IdtStatus {
    guard(|| {
        let v = handle(vol, "vol")?;
        if m >= v.0.n_slices() {
            return Err(fail(IdtStatus::InvalidArgument, format!("slice {m} out of range")));
        }
        let s = v.0.delta_eps().index_axis(Axis(0), m).mapv(|c| c.re);
        copy_out(s.as_slice().expect("standard layout"), buf, len)
    })
}

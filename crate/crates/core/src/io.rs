//! On-disk containers: a directory holding `manifest.json` plus raw
//! little-endian `f64` slabs in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::forward::{IntensityDataset, NoiseRecord, PermittivityVolume, Provenance};
use crate::illumination::{IlluminationManifest, IlluminationSet, Led};
use crate::optics::OpticalConfig;
use crate::recon::{ReconParams, ReconstructionVolume};
use crate::transfer::band_support;

pub const MANIFEST: &str = "manifest.json";
const DTYPE: &str = "float64le";
const ORDER: &str = "row_major";

fn container_err(path: &Path, detail: impl Into<String>) -> IdtError {
    IdtError::Container {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| container_err(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| container_err(path, e.to_string()))
}

/// Writes `values` as raw little-endian `f64`.
pub fn write_f64_le<'a>(path: &Path, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads exactly `count` little-endian `f64` values.
pub fn read_f64_le(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| container_err(path, e.to_string()))?;
    if bytes.len() != count * 8 {
        return Err(container_err(
            path,
            format!("expected {} bytes, found {}", count * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn read_slab(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let v = read_f64_le(path, shape.0 * shape.1)?;
    Ok(Array2::from_shape_vec(shape, v).expect("length checked"))
}

fn check_format(path: &Path, found: &str, expected: &str, dtype: &str, order: &str) -> Result<()> {
    if found != expected {
        return Err(container_err(
            path,
            format!("format is {found:?}, expected {expected:?}"),
        ));
    }
    if dtype != DTYPE || order != ORDER {
        return Err(container_err(path, format!("unsupported layout {dtype}/{order}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- previews

/// Min/max used to map a slab onto 0..=255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewRecord {
    pub file: String,
    pub min: f64,
    pub max: f64,
}

/// 8-bit grayscale PNG, linearly scaled from min to max (constant images are black).
pub fn write_preview_png(path: &Path, data: &Array2<f64>) -> Result<PreviewRecord> {
    let (min, max) = data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let span = max - min;
    let (ny, nx) = data.dim();
    let mut img = image::GrayImage::new(nx as u32, ny as u32);
    for ((iy, ix), &v) in data.indexed_iter() {
        let t = if span > 0.0 && v.is_finite() {
            (v - min) / span
        } else {
            0.0
        };
        img.put_pixel(
            ix as u32,
            iy as u32,
            image::Luma([(t * 255.0).round().clamp(0.0, 255.0) as u8]),
        );
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(PreviewRecord {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        min,
        max,
    })
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: OpticalConfig,
    pub illumination: IlluminationManifest,
    pub provenance: Provenance,
    #[serde(default)]
    pub noise: Option<NoiseRecord>,
    pub shape: [usize; 2],
    pub dtype: String,
    pub order: String,
    #[serde(default)]
    pub background: Option<Vec<f64>>,
    pub files: Vec<String>,
}

const DATASET_FORMAT: &str = "idt-dataset";

pub fn led_file_name(l: usize) -> String {
    format!("led_{l:04}.bin")
}

pub fn write_dataset(dir: &Path, ds: &IntensityDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (ny, nx) = ds.config().shape();
    let files: Vec<String> = (0..ds.len()).map(led_file_name).collect();
    for (img, f) in ds.images().iter().zip(&files) {
        write_f64_le(&dir.join(f), img.iter())?;
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config: ds.config().clone(),
        illumination: ds.illumination().to_manifest(),
        provenance: ds.provenance(),
        noise: ds.noise(),
        shape: [ny, nx],
        dtype: DTYPE.into(),
        order: ORDER.into(),
        background: ds.background().map(|b| b.to_vec()),
        files,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<IntensityDataset> {
    let mpath = dir.join(MANIFEST);
    let m: DatasetManifest = read_json(&mpath)?;
    check_format(&mpath, &m.format, DATASET_FORMAT, &m.dtype, &m.order)?;
    let shape = (m.shape[0], m.shape[1]);
    if shape != m.config.shape() {
        return Err(container_err(
            &mpath,
            format!("shape {shape:?} differs from config {:?}", m.config.shape()),
        ));
    }
    let illum = IlluminationSet::from_manifest(m.illumination)?;
    if m.files.len() != illum.len() {
        return Err(container_err(
            &mpath,
            format!("{} files for {} LEDs", m.files.len(), illum.len()),
        ));
    }
    if let Some(bg) = &m.background {
        if bg.len() != illum.len() {
            return Err(container_err(
                &mpath,
                format!("{} backgrounds for {} LEDs", bg.len(), illum.len()),
            ));
        }
        if let Some((index, &value)) = bg.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(IdtError::NonPositiveBackground { index, value });
        }
    }
    let images = m
        .files
        .iter()
        .map(|f| read_slab(&dir.join(f), shape))
        .collect::<Result<Vec<_>>>()?;
    Ok(IntensityDataset::from_parts(
        images,
        m.background,
        illum,
        m.config,
        m.provenance,
        m.noise,
    ))
}

// ---------------------------------------------------------------- slab volumes

/// Lateral and axial band limits in cycles/um.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCutoffs {
    pub lateral_cycles_per_um: f64,
    pub axial_cycles_per_um: f64,
}

impl BandCutoffs {
    pub fn of(cfg: &OpticalConfig) -> Self {
        let (lateral, axial) = band_support(cfg);
        Self {
            lateral_cycles_per_um: lateral,
            axial_cycles_per_um: axial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabManifest {
    pub format: String,
    pub shape: [usize; 2],
    pub slice_z: Vec<f64>,
    pub dz: f64,
    pub dtype: String,
    pub order: String,
    pub phase_files: Vec<String>,
    pub absorption_files: Vec<String>,
    #[serde(default)]
    pub config: Option<OpticalConfig>,
    #[serde(default)]
    pub band: Option<BandCutoffs>,
    #[serde(default)]
    pub params: Option<ReconParams>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub imag_residual: Option<f64>,
    #[serde(default)]
    pub phase_previews: Vec<PreviewRecord>,
    #[serde(default)]
    pub absorption_previews: Vec<PreviewRecord>,
}

const RECON_FORMAT: &str = "idt-reconstruction";
const VOLUME_FORMAT: &str = "idt-volume";

fn phase_file(m: usize) -> String {
    format!("phase_{m:03}.bin")
}
fn absorption_file(m: usize) -> String {
    format!("absorption_{m:03}.bin")
}

struct SlabWrite<'a> {
    format: &'static str,
    phase: &'a Array3<f64>,
    absorption: &'a Array3<f64>,
    slice_z: &'a [f64],
    dz: f64,
    cfg: Option<&'a OpticalConfig>,
    previews: bool,
}

fn write_slabs(dir: &Path, w: SlabWrite<'_>) -> Result<SlabManifest> {
    fs::create_dir_all(dir)?;
    let (_, ny, nx) = w.phase.dim();
    let n = w.slice_z.len();
    let mut manifest = SlabManifest {
        format: w.format.into(),
        shape: [ny, nx],
        slice_z: w.slice_z.to_vec(),
        dz: w.dz,
        dtype: DTYPE.into(),
        order: ORDER.into(),
        phase_files: (0..n).map(phase_file).collect(),
        absorption_files: (0..n).map(absorption_file).collect(),
        config: w.cfg.cloned(),
        band: w.cfg.map(BandCutoffs::of),
        params: None,
        alpha: None,
        beta: None,
        imag_residual: None,
        phase_previews: Vec::new(),
        absorption_previews: Vec::new(),
    };
    for m in 0..n {
        let (p, a) = (w.phase.index_axis(Axis(0), m), w.absorption.index_axis(Axis(0), m));
        write_f64_le(&dir.join(&manifest.phase_files[m]), p.iter())?;
        write_f64_le(&dir.join(&manifest.absorption_files[m]), a.iter())?;
        if w.previews {
            manifest.phase_previews.push(write_preview_png(
                &dir.join(format!("phase_{m:03}.png")),
                &p.to_owned(),
            )?);
            manifest.absorption_previews.push(write_preview_png(
                &dir.join(format!("absorption_{m:03}.png")),
                &a.to_owned(),
            )?);
        }
    }
    Ok(manifest)
}

fn read_slabs(dir: &Path, expected: &str) -> Result<(SlabManifest, Array3<f64>, Array3<f64>)> {
    let mpath = dir.join(MANIFEST);
    let m: SlabManifest = read_json(&mpath)?;
    check_format(&mpath, &m.format, expected, &m.dtype, &m.order)?;
    let n = m.slice_z.len();
    if m.phase_files.len() != n || m.absorption_files.len() != n {
        return Err(container_err(
            &mpath,
            format!(
                "{n} slices but {}/{} files",
                m.phase_files.len(),
                m.absorption_files.len()
            ),
        ));
    }
    let shape = (m.shape[0], m.shape[1]);
    let mut phase = Array3::zeros((n, shape.0, shape.1));
    let mut absorption = Array3::zeros((n, shape.0, shape.1));
    for s in 0..n {
        phase
            .index_axis_mut(Axis(0), s)
            .assign(&read_slab(&dir.join(&m.phase_files[s]), shape)?);
        absorption
            .index_axis_mut(Axis(0), s)
            .assign(&read_slab(&dir.join(&m.absorption_files[s]), shape)?);
    }
    Ok((m, phase, absorption))
}

pub fn write_reconstruction(
    dir: &Path,
    recon: &ReconstructionVolume,
    cfg: Option<&OpticalConfig>,
    params: Option<&ReconParams>,
    previews: bool,
) -> Result<()> {
    let mut manifest = write_slabs(
        dir,
        SlabWrite {
            format: RECON_FORMAT,
            phase: &recon.phase,
            absorption: &recon.absorption,
            slice_z: &recon.slice_z,
            dz: recon.dz,
            cfg,
            previews,
        },
    )?;
    manifest.params = params.cloned();
    manifest.alpha = Some(recon.alpha);
    manifest.beta = Some(recon.beta);
    manifest.imag_residual = Some(recon.imag_residual);
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_reconstruction(dir: &Path) -> Result<(ReconstructionVolume, SlabManifest)> {
    let (m, phase, absorption) = read_slabs(dir, RECON_FORMAT)?;
    let recon = ReconstructionVolume {
        phase,
        absorption,
        slice_z: m.slice_z.clone(),
        dz: m.dz,
        alpha: m.alpha.unwrap_or(0.0),
        beta: m.beta.unwrap_or(0.0),
        imag_residual: m.imag_residual.unwrap_or(0.0),
    };
    Ok((recon, m))
}

/// Stores a permittivity volume with the real part as `phase_*` and the
/// imaginary part as `absorption_*`.
pub fn write_volume(dir: &Path, vol: &PermittivityVolume, cfg: Option<&OpticalConfig>, previews: bool) -> Result<()> {
    let phase = vol.delta_eps().mapv(|v| v.re);
    let absorption = vol.delta_eps().mapv(|v| v.im);
    let manifest = write_slabs(
        dir,
        SlabWrite {
            format: VOLUME_FORMAT,
            phase: &phase,
            absorption: &absorption,
            slice_z: vol.slice_z(),
            dz: vol.dz(),
            cfg,
            previews,
        },
    )?;
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_volume(dir: &Path) -> Result<PermittivityVolume> {
    let (m, phase, absorption) = read_slabs(dir, VOLUME_FORMAT)?;
    let mut data = Array3::zeros(phase.dim());
    ndarray::Zip::from(&mut data)
        .and(&phase)
        .and(&absorption)
        .for_each(|d, &p, &a| *d = Complex64::new(p, a));
    PermittivityVolume::new(data, m.slice_z, m.dz)
}

// ---------------------------------------------------------------- TF export

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfSidecar {
    pub l: usize,
    pub m: usize,
    pub z: f64,
    pub ux: f64,
    pub uy: f64,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Interleaved `(re, im)` file of the phase transfer function.
    pub phase_file: String,
    pub absorption_file: String,
}

/// Paths of the sidecar for LED position `l`, slice `m`.
pub fn tf_sidecar_path(dir: &Path, l: usize, m: usize) -> PathBuf {
    dir.join(format!("tf_l{l:04}_m{m:03}.json"))
}

fn write_complex(path: &Path, data: &Array2<Complex64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in data.iter() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_complex(path: &Path, shape: (usize, usize)) -> Result<Array2<Complex64>> {
    let v = read_f64_le(path, 2 * shape.0 * shape.1)?;
    let c = v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    Ok(Array2::from_shape_vec(shape, c).expect("length checked"))
}

pub fn write_tf_export(
    dir: &Path,
    l: usize,
    m: usize,
    z: f64,
    led: &Led,
    h_re: &Array2<Complex64>,
    h_im: &Array2<Complex64>,
) -> Result<TfSidecar> {
    fs::create_dir_all(dir)?;
    let (ny, nx) = h_re.dim();
    let sidecar = TfSidecar {
        l,
        m,
        z,
        ux: led.u[0],
        uy: led.u[1],
        shape: [ny, nx],
        dtype: "complex128le_interleaved".into(),
        phase_file: format!("tf_l{l:04}_m{m:03}_phase.bin"),
        absorption_file: format!("tf_l{l:04}_m{m:03}_absorption.bin"),
    };
    write_complex(&dir.join(&sidecar.phase_file), h_re)?;
    write_complex(&dir.join(&sidecar.absorption_file), h_im)?;
    write_json(&tf_sidecar_path(dir, l, m), &sidecar)?;
    Ok(sidecar)
}

pub fn read_tf_export(dir: &Path, l: usize, m: usize) -> Result<(TfSidecar, Array2<Complex64>, Array2<Complex64>)> {
    let s: TfSidecar = read_json(&tf_sidecar_path(dir, l, m))?;
    let shape = (s.shape[0], s.shape[1]);
    let h_re = read_complex(&dir.join(&s.phase_file), shape)?;
    let h_im = read_complex(&dir.join(&s.absorption_file), shape)?;
    Ok((s, h_re, h_im))
}

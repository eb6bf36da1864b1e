//! End-to-end steps driven by a [`RunConfig`].

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{CutAxis, ForwardModel, PatternChoice, RunConfig, SampleSource};
use crate::error::{IdtError, Result};
use crate::forward::{simulate_intensity_born, simulate_intensity_multislice, IntensityDataset, PermittivityVolume};
use crate::illumination::{pattern_pseudorandom, pattern_symmetric, select_brightfield, IlluminationSet};
use crate::io;
use crate::metrics;
use crate::optics::{FrequencyGrid, OpticalConfig, Pupil};
use crate::phantom::{make_phantom, PhantomSpec, TwoLayerTarget};
use crate::recon::{reconstruct_with_stats, ReconStats, ReconstructionVolume};

/// Sub-directories of a run's output directory.
pub const PHANTOM_DIR: &str = "phantom";
pub const DATASET_DIR: &str = "dataset";
pub const RECON_DIR: &str = "recon";
pub const TF_DIR: &str = "tf";
pub const REPORT_FILE: &str = "report.json";

/// Optics, pupil and illumination resolved from a config.
#[derive(Debug, Clone)]
pub struct Rig {
    pub cfg: OpticalConfig,
    pub grid: FrequencyGrid,
    pub pupil: Pupil,
    pub full: IlluminationSet,
    pub illum: IlluminationSet,
}

impl Rig {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let cfg = run.optics.clone();
        let full = select_brightfield(&run.led_array, &cfg)?;
        let illum = match &run.pattern {
            PatternChoice::FullBrightfield => full.clone(),
            PatternChoice::Symmetric {
                n_rings,
                n_per_ring,
                include_center,
            } => pattern_symmetric(&full, &cfg, *n_rings, *n_per_ring, *include_center)?,
            PatternChoice::Pseudorandom {
                count,
                seed,
                include_center,
            } => pattern_pseudorandom(&full, *count, seed.unwrap_or(run.seed), *include_center)?,
        };
        Ok(Self {
            grid: FrequencyGrid::new(&cfg),
            pupil: Pupil::ideal(&cfg),
            cfg,
            full,
            illum,
        })
    }
}

/// Ground-truth volume, or `None` for dataset sources.
pub fn sample_volume(run: &RunConfig) -> Result<Option<PermittivityVolume>> {
    match &run.sample {
        SampleSource::Phantom { phantom, .. } => {
            let layout = run.layout().expect("phantom source has a layout")?;
            make_phantom(phantom, &run.optics, &layout).map(Some)
        }
        SampleSource::Volume { path } => io::read_volume(path).map(Some),
        SampleSource::Dataset { .. } => Ok(None),
    }
}

pub fn simulate(run: &RunConfig, rig: &Rig, vol: &PermittivityVolume) -> Result<IntensityDataset> {
    let ds = match run.forward.model {
        ForwardModel::Born => simulate_intensity_born(vol, &rig.illum, &rig.pupil, &rig.grid, &rig.cfg, false)?,
        ForwardModel::BornFull => simulate_intensity_born(vol, &rig.illum, &rig.pupil, &rig.grid, &rig.cfg, true)?,
        ForwardModel::Multislice => simulate_intensity_multislice(
            vol,
            &rig.illum,
            &rig.pupil,
            &rig.grid,
            &rig.cfg,
            &run.forward.multislice,
        )?,
    };
    match run.noise {
        Some(n) if n.sigma > 0.0 => ds.with_noise(n.sigma, run.seed),
        _ => Ok(ds),
    }
}

/// Dataset for the run: read from disk for dataset sources, simulated otherwise.
pub fn dataset(run: &RunConfig) -> Result<IntensityDataset> {
    if let SampleSource::Dataset { path } = &run.sample {
        return io::read_dataset(path);
    }
    let rig = Rig::new(run)?;
    let vol = sample_volume(run)?.expect("non-dataset source has a volume");
    simulate(run, &rig, &vol)
}

pub fn reconstruct(run: &RunConfig, ds: &IntensityDataset) -> Result<(ReconstructionVolume, ReconStats)> {
    let params = run.recon_params()?;
    reconstruct_with_stats(ds, &Pupil::ideal(ds.config()), &params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub z: f64,
    pub truth_available: bool,
    pub phase_correlation: f64,
    pub phase_nrmse: f64,
    pub absorption_correlation: f64,
    pub absorption_nrmse: f64,
    pub phase_energy: f64,
    pub absorption_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationResult {
    pub slice: usize,
    pub period_um: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutlineResult {
    pub slice: usize,
    pub axis: CutAxis,
    pub index: usize,
    /// Heights (um) when `n_ph` was given, phase contrast otherwise.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightResult {
    pub true_nm: f64,
    pub recovered_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub slices: Vec<SliceMetrics>,
    /// Correlation over all slices with ground truth.
    pub volume_phase_correlation: f64,
    pub modulation: Vec<ModulationResult>,
    pub cutlines: Vec<CutlineResult>,
    pub height: Option<HeightResult>,
}

fn truth_slice(truth: Option<&PermittivityVolume>, z: f64) -> Option<usize> {
    truth.and_then(|t| t.slice_z().iter().position(|tz| (tz - z).abs() < 1e-9))
}

/// In-band correlation over a set of `(recon, truth)` slice pairs.
pub fn volume_band_correlation(pairs: &[(Array2<f64>, Array2<f64>)], cfg: &OpticalConfig) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        let (ea, eb) = (metrics::band_energy(a.view(), cfg), metrics::band_energy(b.view(), cfg));
        let c = metrics::band_correlation(a.view(), b.view(), cfg);
        ab += c * (ea * eb).sqrt();
        aa += ea;
        bb += eb;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

pub fn report(
    run: &RunConfig,
    cfg: &OpticalConfig,
    recon: &ReconstructionVolume,
    truth: Option<&PermittivityVolume>,
) -> Result<Report> {
    if recon.shape() != cfg.shape() {
        return Err(IdtError::ShapeMismatch(format!(
            "reconstruction is {:?}, grid is {:?}",
            recon.shape(),
            cfg.shape()
        )));
    }
    let mut slices = Vec::with_capacity(recon.n_slices());
    let mut pairs = Vec::new();
    for (m, &z) in recon.slice_z.iter().enumerate() {
        let p = recon.phase.index_axis(Axis(0), m);
        let a = recon.absorption.index_axis(Axis(0), m);
        let mut s = SliceMetrics {
            z,
            truth_available: false,
            phase_correlation: 0.0,
            phase_nrmse: 0.0,
            absorption_correlation: 0.0,
            absorption_nrmse: 0.0,
            phase_energy: metrics::energy(p),
            absorption_energy: metrics::energy(a),
        };
        if let (Some(t), Some(mt)) = (truth, truth_slice(truth, z)) {
            let (tp, ta) = (t.real_part(mt), t.imag_part(mt));
            s.truth_available = true;
            s.phase_correlation = metrics::band_correlation(p, tp.view(), cfg);
            s.phase_nrmse = metrics::band_nrmse(p, tp.view(), cfg);
            s.absorption_correlation = metrics::band_correlation(a, ta.view(), cfg);
            s.absorption_nrmse = metrics::band_nrmse(a, ta.view(), cfg);
            pairs.push((p.to_owned(), tp));
        }
        slices.push(s);
    }

    let mut modulation = Vec::new();
    for probe in &run.report.modulation {
        let depth = match (
            recon_slice(recon, probe.slice)?,
            truth.and_then(|t| truth_slice(Some(t), recon.slice_z[probe.slice])),
        ) {
            (p, Some(mt)) => {
                let t = truth.expect("checked").real_part(mt);
                let length = probe.length_um.unwrap_or(5.0 * probe.period_um);
                let center = ((cfg.ny() / 2) as f64 * cfg.dy(), (cfg.nx() / 2) as f64 * cfg.dx());
                metrics::modulation_depth(
                    p.view(),
                    t.view(),
                    cfg,
                    probe.period_um,
                    probe.orientation,
                    center,
                    length,
                )
            }
            _ => 0.0,
        };
        modulation.push(ModulationResult {
            slice: probe.slice,
            period_um: probe.period_um,
            depth,
        });
    }

    let mut cutlines = Vec::new();
    for probe in &run.report.cutlines {
        let p = recon_slice(recon, probe.slice)?;
        let axis = match probe.axis {
            CutAxis::Row => Axis(0),
            CutAxis::Column => Axis(1),
        };
        if probe.index >= p.len_of(axis) {
            return Err(IdtError::InvalidConfig(format!(
                "cutline index {} out of range",
                probe.index
            )));
        }
        let mut values = metrics::cutline(p.view(), axis, probe.index);
        if let Some(n) = probe.n_ph {
            if !(n > 1.0) {
                return Err(IdtError::InvalidConfig(format!("n_ph {n} must exceed 1")));
            }
            values.iter_mut().for_each(|v| *v *= recon.dz / (n * n - 1.0));
        }
        cutlines.push(CutlineResult {
            slice: probe.slice,
            axis: probe.axis,
            index: probe.index,
            values,
        });
    }

    Ok(Report {
        volume_phase_correlation: volume_band_correlation(&pairs, cfg),
        slices,
        modulation,
        cutlines,
        height: two_layer_height(run, cfg, recon)?,
    })
}

fn recon_slice(recon: &ReconstructionVolume, m: usize) -> Result<Array2<f64>> {
    if m >= recon.n_slices() {
        return Err(IdtError::InvalidConfig(format!(
            "slice {m} out of range for {} slices",
            recon.n_slices()
        )));
    }
    Ok(recon.phase.index_axis(Axis(0), m).to_owned())
}

/// Plateau height of the in-focus phase pattern of a two-layer target (nm).
pub fn recovered_height_nm(target: &TwoLayerTarget, cfg: &OpticalConfig, recon: &ReconstructionVolume) -> Option<f64> {
    let m = recon.slice_z.iter().position(|z| z.abs() < 1e-9)?;
    let p = recon.phase.index_axis(Axis(0), m);
    let step = metrics::plateau_step(p, &target.phase_coverage(cfg), 2);
    Some(step * recon.dz / (target.n_ph * target.n_ph - 1.0) * 1e3)
}

fn two_layer_height(
    run: &RunConfig,
    cfg: &OpticalConfig,
    recon: &ReconstructionVolume,
) -> Result<Option<HeightResult>> {
    let SampleSource::Phantom {
        phantom:
            PhantomSpec::TwoLayerTarget {
                height_nm,
                n_ph,
                absorption_strength,
                separation_um,
                phase_period_um,
                absorption_period_um,
            },
        ..
    } = &run.sample
    else {
        return Ok(None);
    };
    let target = TwoLayerTarget {
        height_nm: *height_nm,
        n_ph: *n_ph,
        absorption_strength: *absorption_strength,
        separation_um: *separation_um,
        phase_period_um: *phase_period_um,
        absorption_period_um: *absorption_period_um,
    };
    Ok(recovered_height_nm(&target, cfg, recon).map(|r| HeightResult {
        true_nm: *height_nm,
        recovered_nm: r,
    }))
}

/// Paths used by a run rooted at `out`.
pub fn run_path(out: &Path, leaf: &str) -> PathBuf {
    out.join(leaf)
}

//! Synthetic permittivity volumes.
//!
//! Shapes are rasterized with 4x4 lateral (and 4 axial, for 3D shapes)
//! supersamples per voxel; each slice holds the contrast averaged over its
//! thickness `dz`. Features stay at least 8 pixels away from the edges.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::forward::{check_slices, PermittivityVolume};
use crate::optics::OpticalConfig;

/// Minimum distance (pixels) between features and the grid edge.
pub const EDGE_MARGIN_PX: usize = 8;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarOrientation {
    /// Bars run along y; the profile varies along x.
    #[default]
    Vertical,
    Horizontal,
}

/// Depth sampling of a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeLayout {
    pub slice_z: Vec<f64>,
    pub dz: f64,
}

impl VolumeLayout {
    pub fn new(slice_z: Vec<f64>, dz: f64) -> Result<Self> {
        check_slices(&slice_z, dz)?;
        Ok(Self { slice_z, dz })
    }

    /// `count` slices of thickness `dz` starting at `z0`.
    pub fn uniform(z0: f64, dz: f64, count: usize) -> Result<Self> {
        Self::new((0..count).map(|m| z0 + dz * m as f64).collect(), dz)
    }
}

fn default_length_periods() -> f64 {
    5.0
}
fn default_phase_period() -> f64 {
    16.0
}
fn default_absorption_period() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomSpec {
    /// Randomly placed spheres.
    Beads {
        count: usize,
        radius_um: f64,
        /// Complex contrast `[re, im]`.
        contrast: [f64; 2],
        seed: u64,
        /// Centre bead `j` on slice `j mod n_slices` instead of a random depth.
        #[serde(default)]
        on_slices: bool,
    },
    /// Tube swept along a circular helix about the grid centre.
    Helix {
        radius_um: f64,
        pitch_um: f64,
        tube_radius_um: f64,
        contrast: [f64; 2],
        #[serde(default)]
        phase_rad: f64,
    },
    /// Phase bars at `z = 0` above absorbing bars `separation_um` upstream.
    TwoLayerTarget {
        height_nm: f64,
        n_ph: f64,
        absorption_strength: f64,
        separation_um: f64,
        #[serde(default = "default_phase_period")]
        phase_period_um: f64,
        #[serde(default = "default_absorption_period")]
        absorption_period_um: f64,
    },
    /// Laterally constant contrast on the listed slices (all when empty).
    UniformSlab {
        contrast: [f64; 2],
        #[serde(default)]
        slices: Vec<usize>,
    },
    /// One three-bar group on the slice nearest `z = 0`.
    BarTarget {
        period_um: f64,
        contrast: [f64; 2],
        #[serde(default)]
        orientation: BarOrientation,
        #[serde(default = "default_length_periods")]
        length_periods: f64,
    },
}

impl PhantomSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn make_phantom(spec: &PhantomSpec, cfg: &OpticalConfig, layout: &VolumeLayout) -> Result<PermittivityVolume> {
    let c = |v: [f64; 2]| Complex64::new(v[0], v[1]);
    match spec {
        PhantomSpec::Beads {
            count,
            radius_um,
            contrast,
            seed,
            on_slices,
        } => make_beads(*count, *radius_um, c(*contrast), *seed, *on_slices, cfg, layout),
        PhantomSpec::Helix {
            radius_um,
            pitch_um,
            tube_radius_um,
            contrast,
            phase_rad,
        } => make_helix(
            *radius_um,
            *pitch_um,
            *tube_radius_um,
            c(*contrast),
            *phase_rad,
            cfg,
            layout,
        ),
        PhantomSpec::TwoLayerTarget {
            height_nm,
            n_ph,
            absorption_strength,
            separation_um,
            phase_period_um,
            absorption_period_um,
        } => {
            let target = TwoLayerTarget {
                height_nm: *height_nm,
                n_ph: *n_ph,
                absorption_strength: *absorption_strength,
                separation_um: *separation_um,
                phase_period_um: *phase_period_um,
                absorption_period_um: *absorption_period_um,
            };
            make_two_layer_target(&target, cfg, layout.dz)
        }
        PhantomSpec::UniformSlab { contrast, slices } => make_uniform_slab(c(*contrast), slices, cfg, layout),
        PhantomSpec::BarTarget {
            period_um,
            contrast,
            orientation,
            length_periods,
        } => make_bar_target(*period_um, c(*contrast), *orientation, *length_periods, cfg, layout),
    }
}

/// Field of view in um, `(height, width)`.
fn extent(cfg: &OpticalConfig) -> (f64, f64) {
    (cfg.ny() as f64 * cfg.dy(), cfg.nx() as f64 * cfg.dx())
}

/// Lateral box that features must stay inside: `[lo, hi]` per axis (um).
fn safe_box(cfg: &OpticalConfig) -> Result<((f64, f64), (f64, f64))> {
    let m = EDGE_MARGIN_PX as f64;
    let (h, w) = extent(cfg);
    let bx = (m * cfg.dx(), w - (m + 1.0) * cfg.dx());
    let by = (m * cfg.dy(), h - (m + 1.0) * cfg.dy());
    if bx.0 >= bx.1 || by.0 >= by.1 {
        return Err(IdtError::Phantom(format!(
            "grid {:?} leaves no room inside the {EDGE_MARGIN_PX}-pixel margin",
            cfg.shape()
        )));
    }
    Ok((by, bx))
}

fn sub_offsets() -> [f64; SUPERSAMPLE] {
    let mut o = [0.0; SUPERSAMPLE];
    for (k, v) in o.iter_mut().enumerate() {
        *v = (k as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
    }
    o
}

/// Fraction of each pixel covered by `inside(y, x)`.
fn coverage(cfg: &OpticalConfig, inside: impl Fn(f64, f64) -> bool) -> Array2<f64> {
    let off = sub_offsets();
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    Array2::from_shape_fn(cfg.shape(), |(iy, ix)| {
        let mut hits = 0usize;
        for oy in off {
            for ox in off {
                let (y, x) = ((iy as f64 + oy) * cfg.dy(), (ix as f64 + ox) * cfg.dx());
                hits += inside(y, x) as usize;
            }
        }
        hits as f64 / n
    })
}

/// Fraction of each voxel (slice thickness `dz` around `z_m`) covered.
fn coverage_3d(cfg: &OpticalConfig, z: f64, dz: f64, inside: impl Fn(f64, f64, f64) -> bool) -> Array2<f64> {
    let off = sub_offsets();
    let mut acc = Array2::zeros(cfg.shape());
    for oz in off {
        let zz = z + oz * dz;
        acc += &coverage(cfg, |y, x| inside(y, x, zz));
    }
    acc / SUPERSAMPLE as f64
}

fn assemble(
    cfg: &OpticalConfig,
    layout: &VolumeLayout,
    slab: impl Fn(usize) -> Array2<Complex64>,
) -> Result<PermittivityVolume> {
    let (ny, nx) = cfg.shape();
    let mut data = Array3::zeros((layout.slice_z.len(), ny, nx));
    for m in 0..layout.slice_z.len() {
        data.index_axis_mut(Axis(0), m).assign(&slab(m));
    }
    PermittivityVolume::new(data, layout.slice_z.clone(), layout.dz)
}

pub fn make_beads(
    count: usize,
    radius_um: f64,
    contrast: Complex64,
    seed: u64,
    on_slices: bool,
    cfg: &OpticalConfig,
    layout: &VolumeLayout,
) -> Result<PermittivityVolume> {
    check_slices(&layout.slice_z, layout.dz)?;
    if !(radius_um > 0.0) {
        return Err(IdtError::Phantom(format!("bead radius {radius_um} must be positive")));
    }
    let ((y0, y1), (x0, x1)) = safe_box(cfg)?;
    if 2.0 * radius_um >= (x1 - x0).min(y1 - y0) {
        return Err(IdtError::Phantom(format!(
            "bead radius {radius_um} um does not fit the grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zmin, zmax) = (layout.slice_z[0], layout.slice_z[layout.slice_z.len() - 1]);
    let centers: Vec<[f64; 3]> = (0..count)
        .map(|j| {
            let y = rng.random_range(y0 + radius_um..y1 - radius_um);
            let x = rng.random_range(x0 + radius_um..x1 - radius_um);
            let z = if on_slices || zmax == zmin {
                layout.slice_z[j % layout.slice_z.len()]
            } else {
                rng.random_range(zmin..zmax)
            };
            [y, x, z]
        })
        .collect();
    let r2 = radius_um * radius_um;
    assemble(cfg, layout, |m| {
        let z = layout.slice_z[m];
        let mut slab = Array2::<Complex64>::zeros(cfg.shape());
        for c in &centers {
            if (z - c[2]).abs() > radius_um + layout.dz {
                continue;
            }
            let cov = coverage_3d(cfg, z, layout.dz, |y, x, zz| {
                (y - c[0]).powi(2) + (x - c[1]).powi(2) + (zz - c[2]).powi(2) <= r2
            });
            slab.zip_mut_with(&cov, |s, &f| *s += contrast * f);
        }
        slab
    })
}

pub fn make_helix(
    radius_um: f64,
    pitch_um: f64,
    tube_radius_um: f64,
    contrast: Complex64,
    phase_rad: f64,
    cfg: &OpticalConfig,
    layout: &VolumeLayout,
) -> Result<PermittivityVolume> {
    check_slices(&layout.slice_z, layout.dz)?;
    if !(radius_um > 0.0 && pitch_um > 0.0 && tube_radius_um > 0.0) {
        return Err(IdtError::Phantom("helix dimensions must be positive".into()));
    }
    let ((y0, y1), (x0, x1)) = safe_box(cfg)?;
    // Rotations about a pixel centre map the grid onto itself.
    let (cy, cx) = ((cfg.ny() / 2) as f64 * cfg.dy(), (cfg.nx() / 2) as f64 * cfg.dx());
    let reach = radius_um + tube_radius_um;
    if cy - reach < y0 || cy + reach > y1 || cx - reach < x0 || cx + reach > x1 {
        return Err(IdtError::Phantom(format!("helix reach {reach} um exceeds the grid")));
    }
    let w = 2.0 * std::f64::consts::PI / pitch_um;
    let t2 = tube_radius_um * tube_radius_um;
    assemble(cfg, layout, |m| {
        let z = layout.slice_z[m];
        let cov = coverage_3d(cfg, z, layout.dz, |y, x, zz| {
            let a = w * zz + phase_rad;
            let (hy, hx) = (cy + radius_um * a.sin(), cx + radius_um * a.cos());
            (y - hy).powi(2) + (x - hx).powi(2) <= t2
        });
        cov.mapv(|f| contrast * f)
    })
}

pub fn make_uniform_slab(
    contrast: Complex64,
    slices: &[usize],
    cfg: &OpticalConfig,
    layout: &VolumeLayout,
) -> Result<PermittivityVolume> {
    check_slices(&layout.slice_z, layout.dz)?;
    if let Some(&bad) = slices.iter().find(|&&m| m >= layout.slice_z.len()) {
        return Err(IdtError::Phantom(format!(
            "slab slice {bad} outside {} slices",
            layout.slice_z.len()
        )));
    }
    assemble(cfg, layout, |m| {
        let on = slices.is_empty() || slices.contains(&m);
        Array2::from_elem(cfg.shape(), if on { contrast } else { Complex64::new(0.0, 0.0) })
    })
}

/// Antialiased coverage of a three-bar group centred at `(cy, cx)` (um).
/// Bars are `period / 2` wide and `length` long.
pub fn bar_group_coverage(
    cfg: &OpticalConfig,
    period_um: f64,
    orientation: BarOrientation,
    length_um: f64,
    center: (f64, f64),
) -> Array2<f64> {
    let half_w = period_um / 4.0;
    coverage(cfg, |y, x| {
        let (across, along) = match orientation {
            BarOrientation::Vertical => (x - center.1, y - center.0),
            BarOrientation::Horizontal => (y - center.0, x - center.1),
        };
        along.abs() <= length_um / 2.0 && (-1..=1).any(|k| (across - k as f64 * period_um).abs() < half_w)
    })
}

/// Lateral footprint `(across, along)` of a bar group (um).
pub fn bar_group_size(period_um: f64, length_um: f64) -> (f64, f64) {
    (2.5 * period_um, length_um)
}

fn grid_center(cfg: &OpticalConfig) -> (f64, f64) {
    ((cfg.ny() / 2) as f64 * cfg.dy(), (cfg.nx() / 2) as f64 * cfg.dx())
}

fn check_group_fits(cfg: &OpticalConfig, period_um: f64, length_um: f64, orientation: BarOrientation) -> Result<()> {
    let ((y0, y1), (x0, x1)) = safe_box(cfg)?;
    let (c_y, c_x) = grid_center(cfg);
    let (across, along) = bar_group_size(period_um, length_um);
    let (hy, hx) = match orientation {
        BarOrientation::Vertical => (along / 2.0, across / 2.0),
        BarOrientation::Horizontal => (across / 2.0, along / 2.0),
    };
    if c_y - hy < y0 || c_y + hy > y1 || c_x - hx < x0 || c_x + hx > x1 {
        return Err(IdtError::Phantom(format!(
            "bar group of period {period_um} um and length {length_um} um exceeds the grid"
        )));
    }
    Ok(())
}

/// Index of the slice nearest `z = 0`.
pub fn focal_slice(layout: &VolumeLayout) -> usize {
    layout
        .slice_z
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(m, _)| m)
        .unwrap_or(0)
}

pub fn make_bar_target(
    period_um: f64,
    contrast: Complex64,
    orientation: BarOrientation,
    length_periods: f64,
    cfg: &OpticalConfig,
    layout: &VolumeLayout,
) -> Result<PermittivityVolume> {
    check_slices(&layout.slice_z, layout.dz)?;
    let pitch = match orientation {
        BarOrientation::Vertical => cfg.dx(),
        BarOrientation::Horizontal => cfg.dy(),
    };
    if !(period_um >= 2.0 * pitch) {
        return Err(IdtError::Phantom(format!(
            "bar period {period_um} um is below two pixels ({} um)",
            2.0 * pitch
        )));
    }
    let length = length_periods * period_um;
    check_group_fits(cfg, period_um, length, orientation)?;
    let cov = bar_group_coverage(cfg, period_um, orientation, length, grid_center(cfg));
    let m0 = focal_slice(layout);
    assemble(cfg, layout, |m| {
        if m == m0 {
            cov.mapv(|f| contrast * f)
        } else {
            Array2::zeros(cfg.shape())
        }
    })
}

/// Phase pattern above an absorbing pattern, both as three-bar groups with
/// perpendicular orientations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerTarget {
    pub height_nm: f64,
    pub n_ph: f64,
    pub absorption_strength: f64,
    pub separation_um: f64,
    pub phase_period_um: f64,
    pub absorption_period_um: f64,
}

impl TwoLayerTarget {
    pub fn new(height_nm: f64, n_ph: f64, absorption_strength: f64, separation_um: f64) -> Self {
        Self {
            height_nm,
            n_ph,
            absorption_strength,
            separation_um,
            phase_period_um: default_phase_period(),
            absorption_period_um: default_absorption_period(),
        }
    }

    /// Slab-averaged phase contrast `(n_ph^2 - 1) h / dz`.
    pub fn phase_contrast(&self, dz: f64) -> f64 {
        (self.n_ph * self.n_ph - 1.0) * self.height_nm * 1e-3 / dz
    }

    pub fn bar_length_um(&self, period_um: f64) -> f64 {
        3.0 * period_um
    }

    /// Coverage of the phase bars (1 inside, 0 outside, fractional at edges).
    pub fn phase_coverage(&self, cfg: &OpticalConfig) -> Array2<f64> {
        let p = self.phase_period_um;
        bar_group_coverage(
            cfg,
            p,
            BarOrientation::Vertical,
            self.bar_length_um(p),
            grid_center(cfg),
        )
    }

    pub fn absorption_coverage(&self, cfg: &OpticalConfig) -> Array2<f64> {
        let p = self.absorption_period_um;
        bar_group_coverage(
            cfg,
            p,
            BarOrientation::Horizontal,
            self.bar_length_um(p),
            grid_center(cfg),
        )
    }

    /// Slices `[-separation, 0]`: absorber upstream, phase pattern in focus.
    pub fn layout(&self, dz: f64) -> Result<VolumeLayout> {
        VolumeLayout::new(vec![-self.separation_um, 0.0], dz)
    }
}

pub fn make_two_layer_target(target: &TwoLayerTarget, cfg: &OpticalConfig, dz: f64) -> Result<PermittivityVolume> {
    if target.height_nm < 0.0 || target.height_nm * 1e-3 > dz {
        return Err(IdtError::Phantom(format!(
            "pattern height {} nm must lie in [0, dz = {dz} um]",
            target.height_nm
        )));
    }
    if !(target.n_ph >= 1.0) || target.absorption_strength < 0.0 {
        return Err(IdtError::Phantom(
            "pattern index must be >= 1 and absorption >= 0".into(),
        ));
    }
    let layout = target
        .layout(dz)
        .map_err(|e| IdtError::Phantom(format!("separation: {e}")))?;
    for (p, o) in [
        (target.phase_period_um, BarOrientation::Vertical),
        (target.absorption_period_um, BarOrientation::Horizontal),
    ] {
        check_group_fits(cfg, p, target.bar_length_um(p), o)?;
    }
    let phase = target.phase_contrast(dz);
    let (pc, ac) = (target.phase_coverage(cfg), target.absorption_coverage(cfg));
    assemble(cfg, &layout, |m| {
        if m == 0 {
            ac.mapv(|f| Complex64::new(0.0, target.absorption_strength * f))
        } else {
            pc.mapv(|f| Complex64::new(phase * f, 0.0))
        }
    })
}

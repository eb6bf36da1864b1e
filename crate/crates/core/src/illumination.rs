//! LED-array geometry and illumination-pattern generation.
//!
//! Quadrant convention used by the pseudorandom generator (angles of `u_i`):
//! `0: ux > 0, uy >= 0`, `1: ux <= 0, uy > 0`, `2: ux < 0, uy <= 0`,
//! `3: ux >= 0, uy < 0`. The on-axis LED belongs to no quadrant.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::optics::{axial_frequency, within_radius, OpticalConfig};

/// Planar LED matrix above the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedArray {
    /// Center-to-center spacing (mm).
    pub pitch_mm: f64,
    /// Distance from the array plane to the sample (mm).
    pub height_mm: f64,
    /// LEDs are indexed `(p, q)` with `p, q` in `[-extent, extent]`.
    pub grid_extent: i32,
    /// Lateral misalignment of the center LED (mm).
    #[serde(default)]
    pub center_offset: [f64; 2],
}

impl Default for LedArray {
    fn default() -> Self {
        Self {
            pitch_mm: 4.0,
            height_mm: 79.0,
            grid_extent: 15,
            center_offset: [0.0, 0.0],
        }
    }
}

/// One illumination plane wave. `u = (ux, uy)` in rad/um.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Led {
    pub p: i32,
    pub q: i32,
    pub u: [f64; 2],
    pub eta: f64,
    pub source_intensity: f64,
}

impl Led {
    pub fn key(&self) -> (i32, i32) {
        (self.p, self.q)
    }

    pub fn u_norm(&self) -> f64 {
        self.u[0].hypot(self.u[1])
    }

    fn azimuth(&self) -> f64 {
        self.u[1].atan2(self.u[0])
    }

    fn quadrant(&self) -> Option<usize> {
        let [ux, uy] = self.u;
        if ux > 0.0 && uy >= 0.0 {
            Some(0)
        } else if ux <= 0.0 && uy > 0.0 {
            Some(1)
        } else if ux < 0.0 && uy <= 0.0 {
            Some(2)
        } else if ux >= 0.0 && uy < 0.0 {
            Some(3)
        } else {
            None
        }
    }
}

/// How an illumination set was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    FullBrightfield,
    Symmetric {
        n_rings: usize,
        n_per_ring: usize,
        #[serde(default)]
        include_center: bool,
    },
    Pseudorandom {
        count: usize,
        seed: u64,
        #[serde(default)]
        include_center: bool,
    },
    /// Hand-assembled set (tests, external acquisitions).
    Custom,
}

/// Ordered LED list; every per-LED array in the pipeline is index-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationSet {
    leds: Vec<Led>,
    pattern: Pattern,
}

impl IlluminationSet {
    pub fn new(leds: Vec<Led>, pattern: Pattern) -> Result<Self> {
        if leds.is_empty() {
            return Err(IdtError::InvalidPattern("illumination set is empty".into()));
        }
        let mut keys: Vec<_> = leds.iter().map(Led::key).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(IdtError::InvalidPattern("duplicate LED index".into()));
        }
        if let Some(l) = leds
            .iter()
            .find(|l| !(l.source_intensity > 0.0 && l.eta > 0.0 && l.u.iter().all(|v| v.is_finite())))
        {
            return Err(IdtError::InvalidPattern(format!(
                "LED ({}, {}) has invalid eta or source intensity",
                l.p, l.q
            )));
        }
        Ok(Self { leds, pattern })
    }

    pub fn leds(&self) -> &[Led] {
        &self.leds
    }
    pub fn len(&self) -> usize {
        self.leds.len()
    }
    pub fn is_empty(&self) -> bool {
        self.leds.is_empty()
    }
    pub fn pattern(&self) -> &Pattern {
        &self.pattern
    }

    /// Fails if any member lies outside the brightfield cone of `cfg`.
    pub fn check_brightfield(&self, cfg: &OpticalConfig) -> Result<()> {
        let cutoff = cfg.pupil_cutoff();
        for l in &self.leds {
            if !within_radius(l.u[0], l.u[1], cutoff) {
                return Err(IdtError::NotBrightfield {
                    p: l.p,
                    q: l.q,
                    u_norm: l.u_norm(),
                    cutoff,
                });
            }
        }
        Ok(())
    }

    /// Copy with per-LED source intensities replaced.
    pub fn with_source_intensities(&self, s: &[f64]) -> Result<Self> {
        if s.len() != self.leds.len() {
            return Err(IdtError::ShapeMismatch(format!(
                "{} source intensities for {} LEDs",
                s.len(),
                self.leds.len()
            )));
        }
        let leds = self
            .leds
            .iter()
            .zip(s)
            .map(|(l, &s)| Led {
                source_intensity: s,
                ..*l
            })
            .collect();
        Self::new(leds, self.pattern.clone())
    }

    /// Subset/reordering by position.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let leds = positions
            .iter()
            .map(|&i| {
                self.leds
                    .get(i)
                    .copied()
                    .ok_or_else(|| IdtError::InvalidPattern(format!("position {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(leds, Pattern::Custom)
    }

    pub fn to_manifest(&self) -> IlluminationManifest {
        let seed = match self.pattern {
            Pattern::Pseudorandom { seed, .. } => Some(seed),
            _ => None,
        };
        IlluminationManifest {
            pattern: self.pattern.clone(),
            seed,
            units: "u: rad/um, eta: rad/um, s: relative".into(),
            leds: self
                .leds
                .iter()
                .map(|l| LedRecord {
                    p: l.p,
                    q: l.q,
                    ux: l.u[0],
                    uy: l.u[1],
                    eta: l.eta,
                    s: l.source_intensity,
                })
                .collect(),
        }
    }

    pub fn from_manifest(m: IlluminationManifest) -> Result<Self> {
        let leds = m
            .leds
            .into_iter()
            .map(|r| Led {
                p: r.p,
                q: r.q,
                u: [r.ux, r.uy],
                eta: r.eta,
                source_intensity: r.s,
            })
            .collect();
        Self::new(leds, m.pattern)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_manifest())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_manifest(serde_json::from_str(s)?)
    }
}

/// On-disk form of an [`IlluminationSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationManifest {
    pub pattern: Pattern,
    pub seed: Option<u64>,
    #[serde(default)]
    pub units: String,
    pub leds: Vec<LedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedRecord {
    pub p: i32,
    pub q: i32,
    pub ux: f64,
    pub uy: f64,
    pub eta: f64,
    pub s: f64,
}

/// Transverse and axial frequency of the plane wave from LED `(p, q)`.
///
/// The LED at `(p pitch + ox, q pitch + oy, d)` sends a plane wave along the unit
/// vector `s`; its transverse frequency is `u = k (s_x, s_y)`.
pub fn led_to_frequency(led_pq: (i32, i32), array: &LedArray, cfg: &OpticalConfig) -> Result<([f64; 2], f64)> {
    if !(array.height_mm > 0.0) || !(array.pitch_mm > 0.0) {
        return Err(IdtError::InvalidConfig(format!(
            "LED array needs positive pitch and height, got {} / {}",
            array.pitch_mm, array.height_mm
        )));
    }
    let (p, q) = led_pq;
    let x = p as f64 * array.pitch_mm + array.center_offset[0];
    let y = q as f64 * array.pitch_mm + array.center_offset[1];
    let r = (x * x + y * y + array.height_mm * array.height_mm).sqrt();
    let k = cfg.k();
    let u = [k * (x / r), k * (y / r)];
    let u_norm = u[0].hypot(u[1]);
    if u_norm >= k {
        return Err(IdtError::OutsidePropagatingCone { p, q, u_norm, k });
    }
    Ok((u, axial_frequency(k, u[0], u[1])))
}

/// Every LED of the array whose plane wave falls inside the objective pupil,
/// ordered lexicographically by `(p, q)`.
pub fn select_brightfield(array: &LedArray, cfg: &OpticalConfig) -> Result<IlluminationSet> {
    let cutoff = cfg.pupil_cutoff();
    let mut leds = Vec::new();
    for p in -array.grid_extent..=array.grid_extent {
        for q in -array.grid_extent..=array.grid_extent {
            let (u, eta) = led_to_frequency((p, q), array, cfg)?;
            if within_radius(u[0], u[1], cutoff) {
                leds.push(Led {
                    p,
                    q,
                    u,
                    eta,
                    source_intensity: 1.0,
                });
            }
        }
    }
    if leds.is_empty() {
        return Err(IdtError::EmptyIllumination { na: cfg.na() });
    }
    IlluminationSet::new(leds, Pattern::FullBrightfield)
}

fn sorted_by_key(mut leds: Vec<Led>) -> Vec<Led> {
    leds.sort_by_key(Led::key);
    leds
}

fn center_led(full: &IlluminationSet) -> Result<Led> {
    full.leds()
        .iter()
        .find(|l| l.u == [0.0, 0.0])
        .copied()
        .ok_or_else(|| IdtError::InvalidPattern("no on-axis LED in the full set".into()))
}

fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Rings of LEDs equally spaced radially and azimuthally.
///
/// The brightfield disc `0 < |u| <= NA k0` is split into `n_rings` equal-width
/// radial bins. In each bin, `n_per_ring` LEDs are picked greedily, one per
/// azimuthal target `2 pi j / n_per_ring`, choosing the closest unused LED
/// (ties go to the smaller `(p, q)`). The on-axis LED is added when requested.
pub fn pattern_symmetric(
    full: &IlluminationSet,
    cfg: &OpticalConfig,
    n_rings: usize,
    n_per_ring: usize,
    include_center: bool,
) -> Result<IlluminationSet> {
    if *full.pattern() != Pattern::FullBrightfield {
        return Err(IdtError::InvalidPattern(
            "symmetric patterns are drawn from a full brightfield set".into(),
        ));
    }
    if n_rings == 0 || n_per_ring == 0 {
        return Err(IdtError::InvalidPattern(
            "rings and LEDs per ring must be nonzero".into(),
        ));
    }
    let radius = cfg.pupil_cutoff();
    let mut bins: Vec<Vec<Led>> = vec![Vec::new(); n_rings];
    for led in sorted_by_key(full.leds().to_vec()) {
        let r = led.u_norm();
        if r == 0.0 {
            continue;
        }
        let bin = ((r / radius * n_rings as f64).ceil() as usize).clamp(1, n_rings) - 1;
        bins[bin].push(led);
    }

    let mut chosen = Vec::with_capacity(n_rings * n_per_ring + 1);
    if include_center {
        chosen.push(center_led(full)?);
    }
    for (ring, mut members) in bins.into_iter().enumerate() {
        if members.len() < n_per_ring {
            return Err(IdtError::RingShortage {
                ring,
                available: members.len(),
                requested: n_per_ring,
            });
        }
        for j in 0..n_per_ring {
            let target = 2.0 * PI * j as f64 / n_per_ring as f64;
            let best = members
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let (ga, gb) = (angular_gap(a.azimuth(), target), angular_gap(b.azimuth(), target));
                    if (ga - gb).abs() <= 1e-12 {
                        a.key().cmp(&b.key())
                    } else {
                        ga.partial_cmp(&gb).unwrap_or(Ordering::Equal)
                    }
                })
                .map(|(i, _)| i)
                .expect("bin holds at least n_per_ring members");
            chosen.push(members.remove(best));
        }
    }
    IlluminationSet::new(
        sorted_by_key(chosen),
        Pattern::Symmetric {
            n_rings,
            n_per_ring,
            include_center,
        },
    )
}

/// `count / 4` LEDs drawn uniformly without replacement from each quadrant of
/// `full`, deterministic in `seed`. The on-axis LED is added when requested.
pub fn pattern_pseudorandom(
    full: &IlluminationSet,
    count: usize,
    seed: u64,
    include_center: bool,
) -> Result<IlluminationSet> {
    if count == 0 || !count.is_multiple_of(4) {
        return Err(IdtError::InvalidPattern(format!(
            "pseudorandom count {count} must be a positive multiple of 4"
        )));
    }
    let per_quadrant = count / 4;
    let mut quadrants: [Vec<Led>; 4] = Default::default();
    for led in sorted_by_key(full.leds().to_vec()) {
        if let Some(qd) = led.quadrant() {
            quadrants[qd].push(led);
        }
    }
    for (quadrant, members) in quadrants.iter().enumerate() {
        if members.len() < per_quadrant {
            return Err(IdtError::QuadrantShortage {
                quadrant,
                available: members.len(),
                requested: per_quadrant,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(count + 1);
    if include_center {
        chosen.push(center_led(full)?);
    }
    for members in &quadrants {
        let picks = rand::seq::index::sample(&mut rng, members.len(), per_quadrant);
        chosen.extend(picks.into_iter().map(|i| members[i]));
    }
    IlluminationSet::new(
        sorted_by_key(chosen),
        Pattern::Pseudorandom {
            count,
            seed,
            include_center,
        },
    )
}

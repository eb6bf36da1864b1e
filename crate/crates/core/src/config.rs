//! Declarative run description, read from TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::forward::MultisliceOptions;
use crate::illumination::LedArray;
use crate::optics::OpticalConfig;
use crate::phantom::{BarOrientation, PhantomSpec, VolumeLayout};
use crate::recon::{ReconParams, Regularization};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternChoice {
    #[default]
    FullBrightfield,
    Symmetric {
        n_rings: usize,
        n_per_ring: usize,
        #[serde(default)]
        include_center: bool,
    },
    /// Uses the run seed when `seed` is absent.
    Pseudorandom {
        count: usize,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        include_center: bool,
    },
}

/// Where the sample comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SampleSource {
    Phantom {
        phantom: PhantomSpec,
        slice_z: Vec<f64>,
        dz: f64,
    },
    /// A volume container written by `phantom`.
    Volume { path: PathBuf },
    /// A measured or previously simulated dataset container; skips simulation.
    Dataset { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardModel {
    /// First-order Born intensity (the reconstruction's own model).
    #[default]
    Born,
    /// Born field including the `|psi_s|^2` term.
    BornFull,
    Multislice,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardConfig {
    #[serde(default)]
    pub model: ForwardModel,
    #[serde(default)]
    pub multislice: MultisliceOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
}

/// Reconstruction depths default to the phantom's slices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReconConfig {
    #[serde(default)]
    pub regularization: Regularization,
    #[serde(default)]
    pub slice_z: Option<Vec<f64>>,
    #[serde(default)]
    pub dz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationProbe {
    pub slice: usize,
    pub period_um: f64,
    #[serde(default)]
    pub orientation: BarOrientation,
    /// Bar length; defaults to five periods.
    #[serde(default)]
    pub length_um: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutAxis {
    Row,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutlineProbe {
    pub slice: usize,
    pub axis: CutAxis,
    pub index: usize,
    /// Convert phase contrast to height with this index (needs `n_ph > 1`).
    #[serde(default)]
    pub n_ph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(default)]
    pub modulation: Vec<ModulationProbe>,
    #[serde(default)]
    pub cutlines: Vec<CutlineProbe>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub optics: OpticalConfig,
    #[serde(default)]
    pub led_array: LedArray,
    #[serde(default)]
    pub pattern: PatternChoice,
    pub sample: SampleSource,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(optics: OpticalConfig, sample: SampleSource) -> Self {
        Self {
            optics,
            led_array: LedArray::default(),
            pattern: PatternChoice::default(),
            sample,
            forward: ForwardConfig::default(),
            noise: None,
            recon: ReconConfig::default(),
            report: ReportConfig::default(),
            seed: 0,
            threads: None,
            output_dir: default_output(),
        }
    }

    /// Parses TOML when the path ends in `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| IdtError::Container {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let cfg = if is_toml {
            Self::from_toml(&text)?
        } else {
            Self::from_json(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IdtError::InvalidConfig(e.to_string()))
    }
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IdtError::InvalidConfig(e.to_string()))
    }

    /// Replaces every seed in the run (phantom, pattern, noise) with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let SampleSource::Phantom {
            phantom: PhantomSpec::Beads { seed: s, .. },
            ..
        } = &mut self.sample
        {
            *s = seed;
        }
        if let PatternChoice::Pseudorandom { seed: s, .. } = &mut self.pattern {
            *s = Some(seed);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let SampleSource::Phantom { slice_z, dz, .. } = &self.sample {
            VolumeLayout::new(slice_z.clone(), *dz)?;
        }
        if let Some(n) = self.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(IdtError::InvalidConfig(format!("noise sigma {} must be >= 0", n.sigma)));
            }
        }
        if self.threads == Some(0) {
            return Err(IdtError::InvalidConfig("threads must be at least 1".into()));
        }
        self.recon_params().map(|_| ())
    }

    /// Phantom layout when the sample is a phantom.
    pub fn layout(&self) -> Option<Result<VolumeLayout>> {
        match &self.sample {
            SampleSource::Phantom { slice_z, dz, .. } => Some(VolumeLayout::new(slice_z.clone(), *dz)),
            _ => None,
        }
    }

    /// Reconstruction depths; falls back to the phantom layout.
    pub fn recon_params(&self) -> Result<ReconParams> {
        let (z, dz) = match (&self.recon.slice_z, self.recon.dz, &self.sample) {
            (Some(z), Some(dz), _) => (z.clone(), dz),
            (z, dz, SampleSource::Phantom { slice_z, dz: pdz, .. }) => {
                (z.clone().unwrap_or_else(|| slice_z.clone()), dz.unwrap_or(*pdz))
            }
            _ => {
                return Err(IdtError::InvalidConfig(
                    "recon.slice_z and recon.dz are required when the sample is not a phantom".into(),
                ))
            }
        };
        Ok(ReconParams::new(z, dz)?.with_regularization(self.recon.regularization))
    }
}

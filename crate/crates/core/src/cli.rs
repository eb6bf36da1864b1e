//! `idt` command-line front end.
//!
//! Every subcommand reads a [`RunConfig`], applies the global flag
//! overrides and writes its containers under the run's output directory.
//! On success a JSON summary goes to stdout; on failure a JSON error record
//! goes to stderr and the exit code is nonzero.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SampleSource};
use crate::error::{IdtError, Result};
use crate::fft::mirror_index;
use crate::io::{self, PreviewRecord};
use crate::pipeline::{self, Rig, DATASET_DIR, PHANTOM_DIR, RECON_DIR, REPORT_FILE, TF_DIR};
use crate::transfer::{compute_tf_slice, symmetry_report};

/// Environment variable consulted when neither `--threads` nor the config sets a pool size.
pub const THREADS_ENV: &str = "IDT_DEFAULT_THREADS";

/// Exit code for pipeline failures (clap uses 2 for usage errors).
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "idt", version, about = "Intensity diffraction tomography runs")]
pub struct Cli {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to the config, then IDT_DEFAULT_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the ground-truth volume container.
    Phantom,
    /// Simulate and write the intensity dataset container.
    Simulate,
    /// Export one transfer-function pair with previews.
    Tf {
        /// Position in the illumination set; defaults to the LED nearest the axis.
        #[arg(long)]
        led: Option<usize>,
        /// Reconstruction slice index; defaults to the slice nearest z = 0.
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Reconstruct and write phase/absorption slices with previews.
    Reconstruct {
        /// Dataset container to invert; defaults to `<out>/dataset` when present,
        /// otherwise the dataset is simulated in memory.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        no_previews: bool,
    },
    /// Compute metrics for a reconstruction container.
    Report {
        /// Reconstruction container; defaults to `<out>/recon`.
        #[arg(long, value_name = "DIR")]
        recon: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Simulate => "simulate",
            Command::Tf { .. } => "tf",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Report { .. } => "report",
        }
    }
}

/// Machine-readable failure record.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub command: Option<&'static str>,
}

impl ErrorRecord {
    pub fn new(err: &IdtError, command: Option<&'static str>) -> Self {
        Self {
            error: err.kind(),
            message: err.to_string(),
            command,
        }
    }
}

/// Config with flag overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| IdtError::InvalidConfig("--config is required".into()))?;
    let mut run = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        run = run.with_seed(seed);
    }
    if let Some(t) = cli.threads {
        run.threads = Some(t);
    }
    if let Some(out) = &cli.out {
        run.output_dir = out.clone();
    }
    run.validate()?;
    Ok(run)
}

/// Pool size: `--threads` / config, then the environment, then all cores.
pub fn thread_count(run: &RunConfig, env: Option<&str>) -> Result<usize> {
    if let Some(t) = run.threads {
        return Ok(t);
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(IdtError::InvalidConfig(format!(
                "{THREADS_ENV}={s} is not a positive integer"
            ))),
        },
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(stdout, "{}", e.render())
            } else {
                write!(stderr, "{}", e.render())
            };
            return code;
        }
    };
    let name = cli.command.name();
    match run_cli(&cli) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            let record = ErrorRecord::new(&e, Some(name));
            let _ = writeln!(stderr, "{}", serde_json::to_string(&record).unwrap_or_default());
            EXIT_FAILURE
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<serde_json::Value> {
    let run = resolve_config(cli)?;
    let env = std::env::var(THREADS_ENV).ok();
    let threads = thread_count(&run, env.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| IdtError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| execute(&cli.command, &run))
}

pub fn execute(command: &Command, run: &RunConfig) -> Result<serde_json::Value> {
    let out = &run.output_dir;
    match command {
        Command::Phantom => cmd_phantom(run, out),
        Command::Simulate => cmd_simulate(run, out),
        Command::Tf { led, slice } => cmd_tf(run, out, *led, *slice),
        Command::Reconstruct { dataset, no_previews } => cmd_reconstruct(run, out, dataset.as_deref(), !no_previews),
        Command::Report { recon } => cmd_report(run, out, recon.as_deref()),
    }
}

pub fn cmd_phantom(run: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let vol = pipeline::sample_volume(run)?
        .ok_or_else(|| IdtError::InvalidConfig("a dataset source has no ground-truth volume".into()))?;
    let dir = pipeline::run_path(out, PHANTOM_DIR);
    io::write_volume(&dir, &vol, Some(&run.optics), true)?;
    Ok(json!({ "command": "phantom", "volume": dir, "slices": vol.n_slices() }))
}

pub fn cmd_simulate(run: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    if matches!(run.sample, SampleSource::Dataset { .. }) {
        return Err(IdtError::InvalidConfig(
            "simulate needs a phantom or volume source".into(),
        ));
    }
    let ds = pipeline::dataset(run)?;
    let dir = pipeline::run_path(out, DATASET_DIR);
    io::write_dataset(&dir, &ds)?;
    Ok(json!({ "command": "simulate", "dataset": dir, "images": ds.len() }))
}

/// Moves the zero frequency to the image centre.
fn centered(a: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = a.dim();
    Array2::from_shape_fn((ny, nx), |(iy, ix)| {
        a[[(iy + ny - ny / 2) % ny, (ix + nx - nx / 2) % nx]]
    })
}

fn magnitude(h: &Array2<Complex64>) -> Array2<f64> {
    h.mapv(Complex64::norm)
}

pub fn cmd_tf(run: &RunConfig, out: &Path, led: Option<usize>, slice: Option<usize>) -> Result<serde_json::Value> {
    let rig = Rig::new(run)?;
    let params = run.recon_params()?;
    let l = match led {
        Some(l) if l < rig.illum.len() => l,
        Some(l) => {
            return Err(IdtError::InvalidConfig(format!(
                "led {l} out of range for {} LEDs",
                rig.illum.len()
            )))
        }
        None => (0..rig.illum.len())
            .min_by(|&a, &b| rig.illum.leds()[a].u_norm().total_cmp(&rig.illum.leds()[b].u_norm()))
            .expect("illumination sets are never empty"),
    };
    let m = match slice {
        Some(m) if m < params.slice_z.len() => m,
        Some(m) => {
            return Err(IdtError::InvalidConfig(format!(
                "slice {m} out of range for {} slices",
                params.slice_z.len()
            )))
        }
        None => (0..params.slice_z.len())
            .min_by(|&a, &b| params.slice_z[a].abs().total_cmp(&params.slice_z[b].abs()))
            .expect("recon params hold at least one slice"),
    };
    let (z, source) = (params.slice_z[m], &rig.illum.leds()[l]);
    let (h_re, h_im) = compute_tf_slice(source, z, &rig.pupil, &rig.grid, &rig.cfg);
    let dir = pipeline::run_path(out, TF_DIR);
    let sidecar = io::write_tf_export(&dir, l, m, z, source, &h_re, &h_im)?;
    let stem = format!("tf_l{l:04}_m{m:03}");
    let previews: Vec<PreviewRecord> = vec![
        io::write_preview_png(&dir.join(format!("{stem}_phase.png")), &centered(&magnitude(&h_re)))?,
        io::write_preview_png(
            &dir.join(format!("{stem}_absorption.png")),
            &centered(&magnitude(&h_im)),
        )?,
    ];
    Ok(json!({
        "command": "tf",
        "sidecar": io::tf_sidecar_path(&dir, l, m),
        "led": l,
        "slice": m,
        "z": z,
        "u": [sidecar.ux, sidecar.uy],
        "phase_antisymmetry": antisymmetry(&h_re),
        "symmetry": symmetry_report(&h_re, &h_im),
        "previews": previews,
    }))
}

/// `max |H(u) + H(-u)| / max |H|`; zero for an odd function.
pub fn antisymmetry(h: &Array2<Complex64>) -> f64 {
    let (ny, nx) = h.dim();
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let worst = h
        .indexed_iter()
        .map(|((iy, ix), v)| (v + h[[mirror_index(iy, ny), mirror_index(ix, nx)]]).norm())
        .fold(0.0f64, f64::max);
    if peak > 0.0 {
        worst / peak
    } else {
        worst
    }
}

pub fn cmd_reconstruct(
    run: &RunConfig,
    out: &Path,
    dataset: Option<&Path>,
    previews: bool,
) -> Result<serde_json::Value> {
    let default_dir = pipeline::run_path(out, DATASET_DIR);
    let source = dataset
        .map(Path::to_path_buf)
        .or_else(|| default_dir.join(io::MANIFEST).is_file().then_some(default_dir));
    let ds = match &source {
        Some(dir) => io::read_dataset(dir)?,
        None => pipeline::dataset(run)?,
    };
    let (recon, stats) = pipeline::reconstruct(run, &ds)?;
    let params = run.recon_params()?;
    let dir = pipeline::run_path(out, RECON_DIR);
    io::write_reconstruction(&dir, &recon, Some(ds.config()), Some(&params), previews)?;
    Ok(json!({
        "command": "reconstruct",
        "dataset": source,
        "reconstruction": dir,
        "slices": recon.n_slices(),
        "alpha": recon.alpha,
        "beta": recon.beta,
        "peak_accumulator_bytes": stats.peak_bytes,
    }))
}

pub fn cmd_report(run: &RunConfig, out: &Path, recon_dir: Option<&Path>) -> Result<serde_json::Value> {
    let dir = recon_dir.map_or_else(|| pipeline::run_path(out, RECON_DIR), Path::to_path_buf);
    let (recon, manifest) = io::read_reconstruction(&dir)?;
    let cfg = manifest.config.clone().unwrap_or_else(|| run.optics.clone());
    let truth = pipeline::sample_volume(run)?;
    let report = pipeline::report(run, &cfg, &recon, truth.as_ref())?;
    std::fs::create_dir_all(out)?;
    let path = pipeline::run_path(out, REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(json!({ "command": "report", "report": path, "metrics": report }))
}

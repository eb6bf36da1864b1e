//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use idt_core::config::{ForwardModel, NoiseConfig, PatternChoice, RunConfig, SampleSource};
use idt_core::forward::{
    born_scattered_field, simulate_intensity_born, simulate_intensity_linear, simulate_intensity_multislice,
    IntensityDataset, MultisliceOptions, PermittivityVolume,
};
use idt_core::io;
use idt_core::metrics::{band_correlation, band_energy, energy, modulation_depth};
use idt_core::phantom::{
    make_bar_target, make_beads, make_two_layer_target, make_uniform_slab, BarOrientation, PhantomSpec, TwoLayerTarget,
    VolumeLayout,
};
use idt_core::pipeline::{self, recovered_height_nm, volume_band_correlation};
use idt_core::recon::{reconstruct, reconstruct_with_stats, ReconParams, ReconstructionVolume, Regularization};
use idt_core::transfer::{band_support, compute_tf_slice, compute_tf_stack, symmetry_report};
use idt_core::{
    pattern_pseudorandom, pattern_symmetric, select_brightfield, FrequencyGrid, IlluminationSet, LedArray,
    OpticalConfig, Pupil,
};
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA: f64 = 0.63;

// Criterion 1
const EQUIVALENCE_TOL: f64 = 1e-9;
const EQUIVALENCE_SECONDS: f64 = 10.0;
// Criterion 2
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_SECONDS: f64 = 5.0;
// Criterion 3
const SYMMETRY_TOL: f64 = 1e-12;
// Criterion 4
const ROUND_TRIP_CORRELATION: f64 = 0.99;
const LEAKAGE_LIMIT: f64 = 0.05;
const ROUND_TRIP_SECONDS: f64 = 60.0;
// Criterion 5
const RAYLEIGH_PERIOD_UM: f64 = 1.54;
const RESOLVED_MODULATION: f64 = 0.2;
const UNRESOLVED_MODULATION: f64 = 0.05;
// Criterion 6
const MISSING_CONE_RATIO: f64 = 0.05;
const AXIAL_CONSISTENCY: f64 = 0.05;
const AXIAL_SAMPLING_UM: f64 = 10.0;
// Criterion 7
const TWO_LAYER_SECONDS: f64 = 120.0;
// Criterion 8
const MONOTONE_SLACK: f64 = 0.01;
const CORRELATION_AT_36: f64 = 0.7;
const COUNT_REGULARIZATION: f64 = 0.1;
// Criterion 9
const SLABS_PER_SLICE: f64 = 6.0;
const EXPONENT_TARGET: f64 = 1.0;
const EXPONENT_SLACK: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rig(na: f64, n: usize, d: f64) -> (OpticalConfig, FrequencyGrid, Pupil, IlluminationSet) {
    let cfg = OpticalConfig::new(LAMBDA, na, 1.0, (n, n), (d, d)).unwrap();
    let grid = FrequencyGrid::new(&cfg);
    let pupil = Pupil::ideal(&cfg);
    let full = select_brightfield(&LedArray::default(), &cfg).unwrap();
    (cfg, grid, pupil, full)
}

fn random_volume(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize),
    slice_z: Vec<f64>,
    dz: f64,
    amp: f64,
) -> PermittivityVolume {
    let m = slice_z.len();
    let data = Array3::from_shape_fn((m, shape.0, shape.1), |_| {
        Complex64::new(rng.random_range(-amp..amp), rng.random_range(0.0..amp))
    });
    PermittivityVolume::new(data, slice_z, dz).unwrap()
}

fn max_abs_diff(a: &IntensityDataset, b: &IntensityDataset) -> (f64, f64) {
    let mut diff = 0.0f64;
    let mut contrast = 0.0f64;
    let bg = b.background().unwrap();
    for ((x, y), &i0) in a.images().iter().zip(b.images()).zip(bg) {
        for (u, v) in x.iter().zip(y.iter()) {
            diff = diff.max((u - v).abs());
            contrast = contrast.max((v - i0).abs());
        }
    }
    (diff, contrast)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: [((usize, usize), usize, usize); 3] = [((64, 64), 5, 8), ((48, 64), 3, 12), ((32, 40), 2, 20)];
    for (shape, m, l) in cases {
        let cfg = OpticalConfig::new(LAMBDA, 0.25, 1.0, shape, (0.5, 0.45)).unwrap();
        let grid = FrequencyGrid::new(&cfg);
        let pupil = Pupil::ideal(&cfg);
        let full = select_brightfield(&LedArray::default(), &cfg).unwrap();
        let illum = pattern_pseudorandom(&full, l, rng.random(), false).unwrap();
        let z: Vec<f64> = (0..m).map(|i| -2.0 + 1.5 * i as f64).collect();
        let vol = random_volume(&mut rng, shape, z.clone(), 1.5, 1e-4);
        let born = simulate_intensity_born(&vol, &illum, &pupil, &grid, &cfg, false).unwrap();
        let tf = compute_tf_stack(&illum, &z, &pupil, &grid, &cfg).unwrap();
        let lin = simulate_intensity_linear(&vol, &tf, &illum, &pupil, &cfg).unwrap();
        let (d, c) = max_abs_diff(&lin, &born);
        worst = worst.max(d / c);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= EQUIVALENCE_TOL && secs < EQUIVALENCE_SECONDS,
        format!("max |linear - born| / contrast = {worst:.2e} (tol {EQUIVALENCE_TOL:.0e}), {secs:.2} s"),
    )
}

/// Direct evaluation of the first Born field: forward DFT of every slice at
/// the physical frequency, depth phase and 1/eta weighting, inverse DFT.
fn direct_born(vol: &PermittivityVolume, led: &idt_core::Led, cfg: &OpticalConfig) -> Array2<Complex64> {
    let (ny, nx) = cfg.shape();
    let (k0, k) = (cfg.k0(), cfg.k());
    let tau = 2.0 * std::f64::consts::PI;
    let freq = |i: usize, n: usize, d: f64| {
        let s = if i < n.div_ceil(2) {
            i as f64
        } else {
            i as f64 - n as f64
        };
        tau * s / (n as f64 * d)
    };
    // Spectrum of every bin: direct sum over slices and source pixels.
    let mut spec = Array2::<Complex64>::zeros((ny, nx));
    for vy in 0..ny {
        for vx in 0..nx {
            // Bin v carries the physical frequency v - u_i.
            let ux = freq(vx, nx, cfg.dx()) - led.u[0];
            let uy = freq(vy, ny, cfg.dy()) - led.u[1];
            let e2 = k * k - ux * ux - uy * uy;
            if e2 <= 0.0 {
                continue;
            }
            let eta = e2.sqrt();
            for m in 0..vol.n_slices() {
                let z = vol.slice_z()[m];
                let mut f = Complex64::new(0.0, 0.0);
                for sy in 0..ny {
                    for sx in 0..nx {
                        let (xs, ys) = (sx as f64 * cfg.dx(), sy as f64 * cfg.dy());
                        let arg = -((ux + led.u[0]) * xs + (uy + led.u[1]) * ys);
                        f += vol.slice(m)[[sy, sx]] * Complex64::from_polar(1.0, arg);
                    }
                }
                spec[[vy, vx]] += f * Complex64::from_polar(vol.dz() / eta, -(eta - led.eta) * z);
            }
        }
    }
    let coef = Complex64::new(0.0, 0.5 * k0 * k0 * led.source_intensity.sqrt()) / (nx * ny) as f64;
    Array2::from_shape_fn((ny, nx), |(iy, ix)| {
        let (x, y) = (ix as f64 * cfg.dx(), iy as f64 * cfg.dy());
        let mut total = Complex64::new(0.0, 0.0);
        for vy in 0..ny {
            for vx in 0..nx {
                let ux = freq(vx, nx, cfg.dx()) - led.u[0];
                let uy = freq(vy, ny, cfg.dy()) - led.u[1];
                total += spec[[vy, vx]] * Complex64::from_polar(1.0, ux * x + uy * y);
            }
        }
        coef * total
    })
}

fn criterion_2() -> Outcome {
    let (cfg, grid, _, full) = rig(0.25, 16, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vol = random_volume(&mut rng, (16, 16), vec![-1.0, 0.0, 1.0], 1.0, 1e-3);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for idx in [0, full.len() / 3, full.len() - 1] {
        let led = &full.leds()[idx];
        let fast = born_scattered_field(&vol, led, &grid, &cfg).unwrap();
        let slow = direct_born(&vol, led, &cfg);
        let peak = slow.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let d = fast
            .iter()
            .zip(slow.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        worst = worst.max(d / peak);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= ORACLE_TOL && secs < ORACLE_SECONDS,
        format!("max relative deviation {worst:.2e} (tol {ORACLE_TOL:.0e}), {secs:.2} s"),
    )
}

fn criterion_3() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.25, 64, 0.5);
    let mut worst = 0.0f64;
    for led in full.leds() {
        let (h_re, h_im) = compute_tf_slice(led, 0.0, &pupil, &grid, &cfg);
        worst = worst.max(symmetry_report(&h_re, &h_im).worst());
    }
    outcome(
        worst <= SYMMETRY_TOL && full.len() == 89,
        format!(
            "{} LEDs, worst residual {worst:.2e} (tol {SYMMETRY_TOL:.0e})",
            full.len()
        ),
    )
}

fn slice_pairs(recon: &ReconstructionVolume, truth: &PermittivityVolume) -> Vec<(Array2<f64>, Array2<f64>)> {
    (0..recon.n_slices())
        .map(|m| (recon.phase.index_axis(Axis(0), m).to_owned(), truth.real_part(m)))
        .collect()
}

fn criterion_4() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.25, 128, 0.5);
    let layout = VolumeLayout::new(vec![-100.0, 0.0, 100.0], 1.0).unwrap();
    let vol = make_beads(18, 1.0, Complex64::new(2e-3, 0.0), 4, true, &cfg, &layout).unwrap();
    let start = Instant::now();
    let ds = simulate_intensity_born(&vol, &full, &pupil, &grid, &cfg, false).unwrap();
    let params = ReconParams::new(layout.slice_z.clone(), layout.dz)
        .unwrap()
        .with_regularization(Regularization::RelativeToPhase {
            alpha: 1e-6,
            beta: 1e-6,
        });
    let recon = reconstruct(&ds, &pupil, &params).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut min_corr = f64::INFINITY;
    let (mut e_phase, mut e_abs) = (0.0, 0.0);
    for m in 0..3 {
        let p = recon.phase.index_axis(Axis(0), m);
        let a = recon.absorption.index_axis(Axis(0), m);
        min_corr = min_corr.min(band_correlation(p, vol.real_part(m).view(), &cfg));
        e_phase += band_energy(p, &cfg);
        e_abs += band_energy(a, &cfg);
    }
    let leak = e_abs / e_phase;
    outcome(
        min_corr >= ROUND_TRIP_CORRELATION && leak < LEAKAGE_LIMIT && secs < ROUND_TRIP_SECONDS,
        format!(
            "min slice correlation {min_corr:.4}, leakage {:.2}%, {secs:.1} s",
            100.0 * leak
        ),
    )
}

fn bar_modulation(period: f64) -> f64 {
    let (cfg, grid, pupil, full) = rig(0.25, 128, 0.25);
    let layout = VolumeLayout::new(vec![0.0], 1.0).unwrap();
    let vol = make_bar_target(
        period,
        Complex64::new(1e-3, 0.0),
        BarOrientation::Vertical,
        5.0,
        &cfg,
        &layout,
    )
    .unwrap();
    let ds = simulate_intensity_born(&vol, &full, &pupil, &grid, &cfg, false).unwrap();
    let params = ReconParams::new(vec![0.0], 1.0).unwrap();
    let recon = reconstruct(&ds, &pupil, &params).unwrap();
    let center = (64.0 * 0.25, 64.0 * 0.25);
    modulation_depth(
        recon.phase.index_axis(Axis(0), 0),
        vol.real_part(0).view(),
        &cfg,
        period,
        BarOrientation::Vertical,
        center,
        5.0 * period,
    )
}

fn criterion_5() -> Outcome {
    let fine = 0.5 * LAMBDA / (2.0 * 0.25);
    let resolved = bar_modulation(RAYLEIGH_PERIOD_UM);
    let unresolved = bar_modulation(fine);
    outcome(
        resolved >= RESOLVED_MODULATION && unresolved <= UNRESOLVED_MODULATION,
        format!("modulation {resolved:.3} at {RAYLEIGH_PERIOD_UM} um, {unresolved:.4} at {fine:.3} um"),
    )
}

fn recon_energy(
    vol: &PermittivityVolume,
    cfg: &OpticalConfig,
    grid: &FrequencyGrid,
    pupil: &Pupil,
    illum: &IlluminationSet,
) -> f64 {
    let ds = simulate_intensity_born(vol, illum, pupil, grid, cfg, false).unwrap();
    let params = ReconParams::new(vol.slice_z().to_vec(), vol.dz()).unwrap();
    let r = reconstruct(&ds, pupil, &params).unwrap();
    (0..r.n_slices())
        .map(|m| energy(r.phase.index_axis(Axis(0), m)) + energy(r.absorption.index_axis(Axis(0), m)))
        .sum()
}

fn criterion_6() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.25, 64, 0.5);
    let layout = VolumeLayout::uniform(-10.0, 5.0, 5).unwrap();
    let slab = make_uniform_slab(Complex64::new(1e-3, 0.0), &[1, 2, 3], &cfg, &layout).unwrap();
    let bars1 = make_bar_target(
        4.0,
        Complex64::new(1.0, 0.0),
        BarOrientation::Vertical,
        3.0,
        &cfg,
        &layout,
    )
    .unwrap();
    // Same bar pattern on the slab's slices, scaled to equal energy.
    let mut data = Array3::zeros(slab.delta_eps().dim());
    for m in [1, 2, 3] {
        data.index_axis_mut(Axis(0), m).assign(&bars1.slice(idx_focus(&layout)));
    }
    let e_slab: f64 = slab.delta_eps().iter().map(|v| v.norm_sqr()).sum();
    let e_bar: f64 = data.iter().map(|v: &Complex64| v.norm_sqr()).sum();
    let bars = PermittivityVolume::new(
        data.mapv(|v| v * (e_slab / e_bar).sqrt()),
        layout.slice_z.clone(),
        layout.dz,
    )
    .unwrap();
    let ratio = recon_energy(&slab, &cfg, &grid, &pupil, &full) / recon_energy(&bars, &cfg, &grid, &pupil, &full);

    let (_, axial) = band_support(&cfg);
    let formula = (2.0 - 2.0 * (1.0 - 0.25f64 * 0.25).sqrt()) / LAMBDA;
    let consistency = ((1.0 / axial) - AXIAL_SAMPLING_UM).abs() / AXIAL_SAMPLING_UM;
    outcome(
        ratio < MISSING_CONE_RATIO && axial == formula && (axial - 0.1008).abs() < 5e-5 && consistency <= AXIAL_CONSISTENCY,
        format!(
            "slab/bar energy {ratio:.2e}, axial cutoff {axial:.5} cyc/um (1/cutoff = {:.3} um vs {AXIAL_SAMPLING_UM} um)",
            1.0 / axial
        ),
    )
}

fn idx_focus(layout: &VolumeLayout) -> usize {
    idt_core::phantom::focal_slice(layout)
}

fn criterion_7() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.25, 128, 0.5);
    let dz = 10.0;
    let start = Instant::now();
    let mut rows = Vec::new();
    for h in [50.0, 100.0, 200.0] {
        let target = TwoLayerTarget::new(h, 1.52, 0.05, 790.0);
        let vol = make_two_layer_target(&target, &cfg, dz).unwrap();
        let ds =
            simulate_intensity_multislice(&vol, &full, &pupil, &grid, &cfg, &MultisliceOptions::default()).unwrap();
        let params = ReconParams::new(vol.slice_z().to_vec(), dz).unwrap();
        let recon = reconstruct(&ds, &pupil, &params).unwrap();
        rows.push((h, recovered_height_nm(&target, &cfg, &recon).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    let under = rows.iter().all(|(h, r)| r < h);
    let err: Vec<f64> = rows.iter().map(|(h, r)| h - r).collect();
    let growing = err.windows(2).all(|w| w[1] > w[0]);
    let table: Vec<String> = rows.iter().map(|(h, r)| format!("{h:.0}->{r:.1}")).collect();
    outcome(
        under && growing && secs < TWO_LAYER_SECONDS,
        format!(
            "heights nm {}, errors {:?}, {secs:.1} s",
            table.join(", "),
            err.iter().map(|e| (e * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn round_trip_correlation(
    vol: &PermittivityVolume,
    illum: &IlluminationSet,
    cfg: &OpticalConfig,
    grid: &FrequencyGrid,
    pupil: &Pupil,
) -> f64 {
    let ds = simulate_intensity_born(vol, illum, pupil, grid, cfg, false).unwrap();
    let params = ReconParams::new(vol.slice_z().to_vec(), vol.dz())
        .unwrap()
        .with_regularization(Regularization::RelativeToTotal {
            alpha: COUNT_REGULARIZATION,
            beta: COUNT_REGULARIZATION,
        });
    let recon = reconstruct(&ds, pupil, &params).unwrap();
    volume_band_correlation(&slice_pairs(&recon, vol), cfg)
}

fn criterion_8() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.65, 64, 0.2);
    let layout = VolumeLayout::uniform(-6.0, 1.0, 22).unwrap();
    let vol = make_beads(8, 1.2, Complex64::new(1e-3, 0.0), 8, false, &cfg, &layout).unwrap();
    let symmetric = [
        pattern_symmetric(&full, &cfg, 2, 76, true).unwrap(),
        pattern_symmetric(&full, &cfg, 2, 52, true).unwrap(),
        pattern_symmetric(&full, &cfg, 3, 12, false).unwrap(),
        pattern_symmetric(&full, &cfg, 2, 8, false).unwrap(),
    ];
    let random = [
        pattern_pseudorandom(&full, 152, 21, true).unwrap(),
        pattern_pseudorandom(&full, 104, 21, true).unwrap(),
        pattern_pseudorandom(&full, 36, 21, false).unwrap(),
        pattern_pseudorandom(&full, 16, 21, false).unwrap(),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, sets) in [("symmetric", &symmetric), ("pseudorandom", &random)] {
        let counts: Vec<usize> = sets.iter().map(IlluminationSet::len).collect();
        let corr: Vec<f64> = sets
            .iter()
            .map(|s| round_trip_correlation(&vol, s, &cfg, &grid, &pupil))
            .collect();
        let monotone = corr.windows(2).all(|w| w[1] <= w[0] + MONOTONE_SLACK);
        pass &= counts == [153, 105, 36, 16] && monotone && corr[2] >= CORRELATION_AT_36;
        let cells: Vec<String> = counts.iter().zip(&corr).map(|(n, c)| format!("{n}:{c:.3}")).collect();
        parts.push(format!("{name} {}", cells.join(" ")));
    }
    outcome(pass, parts.join("; "))
}

fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion_9() -> Outcome {
    let (cfg, grid, pupil, full) = rig(0.65, 128, 0.2);
    let layout = VolumeLayout::uniform(-3.0, 1.0, 8).unwrap();
    let vol = make_beads(6, 1.5, Complex64::new(1e-3, 0.0), 9, false, &cfg, &layout).unwrap();
    let big = pattern_pseudorandom(&full, 128, 5, false).unwrap();
    let ds_all = simulate_intensity_born(&vol, &big, &pupil, &grid, &cfg, false).unwrap();
    let params = ReconParams::new(layout.slice_z.clone(), layout.dz).unwrap();
    let ls = [16usize, 32, 64, 128];
    let subsets: Vec<IntensityDataset> = ls
        .iter()
        .map(|&l| ds_all.select(&(0..l).map(|i| i * 128 / l).collect::<Vec<_>>()).unwrap())
        .collect();
    // Interleaved rounds after a warm-up; the fastest run of each L is kept.
    reconstruct_with_stats(&subsets[0], &pupil, &params).unwrap();
    let mut times = vec![f64::INFINITY; ls.len()];
    let mut peaks = Vec::new();
    let mut worst_slabs = 0.0f64;
    for _ in 0..5 {
        for (i, ds) in subsets.iter().enumerate() {
            let start = Instant::now();
            let (_, stats) = reconstruct_with_stats(ds, &pupil, &params).unwrap();
            times[i] = times[i].min(start.elapsed().as_secs_f64());
            worst_slabs = worst_slabs.max(stats.peak_slabs_per_slice());
            peaks.push(stats.peak_bytes);
        }
    }
    let slope = log_slope(&ls.map(|v| v as f64), &times);
    let flat = peaks.iter().all(|p| *p == peaks[0]);
    outcome(
        worst_slabs <= SLABS_PER_SLICE && flat && (slope - EXPONENT_TARGET).abs() <= EXPONENT_SLACK,
        format!(
            "peak {worst_slabs:.2} slabs/slice (same for every L: {flat}), time exponent {slope:.3}, times {:?}",
            times.iter().map(|t| (t * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    )
}

fn determinism_config(out: &std::path::Path) -> RunConfig {
    let optics = OpticalConfig::new(LAMBDA, 0.25, 1.0, (48, 48), (0.5, 0.5)).unwrap();
    let mut run = RunConfig::new(
        optics,
        SampleSource::Phantom {
            phantom: PhantomSpec::Beads {
                count: 5,
                radius_um: 2.0,
                contrast: [1e-3, 2e-4],
                seed: 0,
                on_slices: false,
            },
            slice_z: vec![-2.0, 0.0, 2.0],
            dz: 1.0,
        },
    )
    .with_seed(17);
    run.pattern = PatternChoice::Pseudorandom {
        count: 24,
        seed: None,
        include_center: true,
    };
    run.forward.model = ForwardModel::BornFull;
    run.noise = Some(NoiseConfig { sigma: 1e-3 });
    run.output_dir = out.to_path_buf();
    run
}

fn run_pipeline(run: &RunConfig, threads: usize) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let ds = pipeline::dataset(run).unwrap();
        io::write_dataset(&run.output_dir.join(pipeline::DATASET_DIR), &ds).unwrap();
        let back = io::read_dataset(&run.output_dir.join(pipeline::DATASET_DIR)).unwrap();
        let (recon, _) = pipeline::reconstruct(run, &back).unwrap();
        io::write_reconstruction(
            &run.output_dir.join(pipeline::RECON_DIR),
            &recon,
            Some(&run.optics),
            None,
            true,
        )
        .unwrap();
    });
}

fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&determinism_config(a.path()), 1);
    run_pipeline(&determinism_config(b.path()), 4);
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    let identical = ta == tb;
    let n_files = ta.len();
    outcome(
        identical && n_files > 0,
        format!("{n_files} files byte-identical across runs (1 and 4 threads): {identical}"),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "model equivalence", criterion_1),
        (2, "brute-force Born oracle", criterion_2),
        (3, "focal-plane TF symmetry", criterion_3),
        (4, "round-trip recovery", criterion_4),
        (5, "lateral resolution", criterion_5),
        (6, "axial band / missing cone", criterion_6),
        (7, "multiple-scattering under-estimation", criterion_7),
        (8, "illumination-count robustness", criterion_8),
        (9, "streamed memory and linear time", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!(
            "criterion {n:>2} {verdict} {name}: {} [{:.1} s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

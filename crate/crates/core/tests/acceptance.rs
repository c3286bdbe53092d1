//! Acceptance suite: one test per release criterion, each printing a
//! one-line metrics summary (`cargo test --test acceptance -- --nocapture`
//! shows the lines for passing tests too).
//!
//! Two criteria encode targets that sit outside what the modeled physics
//! can deliver; they are kept at their stated tolerances rather than
//! loosened, so their failures are visible and diagnosable:
//!
//! * `noise_suppression_by_pair_rescaling` demands a rescaled-to-shot
//!   ratio below 2, but with detection efficiencies of 0.03/0.13 the
//!   rescaled floor is mean·sqrt(1/mean_i + 1/mean_s − 2/pairs) ≈ 2.25×
//!   shot — the signal arm's own shot noise dominates and no estimator
//!   can go below it at these efficiencies.
//! * `calibration_recovery` demands every parameter within 2% under
//!   Poisson noise at 10⁴ counts/point. The offset parameter's sampling
//!   spread at that noise level is ≈1.8 nm (it trades off against the
//!   scale parameter over a ~3250 nm lever arm), an order of magnitude
//!   wider than 2% of 5 nm; the scale and thickness parameters pass.

use std::fs;
use std::path::Path;
use std::time::Instant;

use hyperspec_core::calibration::{
    fit_calibration, idler_wavelength, signal_wavelength, CalibrationModel, SpectrumPoint,
    SpectrumSource, TransmissionSpectrum,
};
use hyperspec_core::correlation::{correlation_fit, fwhm, noise_stats, rescale_idler};
use hyperspec_core::gating::{gated_counts, GateWindow};
use hyperspec_core::hypercube::{
    assemble_cube, contrast_image, extract_spectrum, ContrastMode, PixelRegion, ScanPlan,
};
use hyperspec_core::io;
use hyperspec_core::pipeline::{materials, run_demo};
use hyperspec_core::sim::{
    simulate_stream, simulate_windows, Phantom, PointKind, RawPoint, RawScan, SourceConfig,
    WindowCounts,
};
use hyperspec_core::timetag::{decode_stream, split_by_trigger, Channel};

fn report(label: &str, pass: bool, metrics: &str) {
    println!(
        "[acceptance] {label}: {metrics} -> {}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn noisy_source(excess_noise_sigma: f64) -> SourceConfig {
    SourceConfig {
        excess_noise_sigma,
        ..SourceConfig::default()
    }
}

/// 2000 two-second windows at 40 kHz with 5% common gain noise: the raw
/// idler spread must sit well above shot noise, rescaling must pull it
/// under twice shot noise, and the rescaled histogram must be narrower.
#[test]
fn noise_suppression_by_pair_rescaling() {
    let start = Instant::now();
    let windows = simulate_windows(&noisy_source(0.05), 1.0, 3000.0, 2.0, 2000, 201).unwrap();
    let stats = noise_stats(&windows).unwrap();
    let raw_ratio = stats.std_raw / stats.shot_noise_level;
    let rescaled_ratio = stats.std_rescaled / stats.shot_noise_level;

    let raw_values: Vec<f64> = windows.iter().map(|w| w.n_idler as f64).collect();
    let rescaled_values = rescale_idler(&windows).unwrap().values;
    let fwhm_raw = fwhm(&raw_values).unwrap();
    let fwhm_rescaled = fwhm(&rescaled_values).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let pass =
        raw_ratio > 3.0 && rescaled_ratio < 2.0 && fwhm_rescaled < fwhm_raw && elapsed < 30.0;
    let metrics = format!(
        "raw/shot = {raw_ratio:.2} (need > 3), rescaled/shot = {rescaled_ratio:.2} (need < 2), \
         fwhm {fwhm_rescaled:.0} vs {fwhm_raw:.0} (need narrower), {elapsed:.1} s (< 30)"
    );
    report("noise suppression by pair rescaling", pass, &metrics);
    assert!(pass, "{metrics}");
}

/// The same bench with a quiet source: the raw spread already sits at the
/// shot-noise level and rescaling is not expected to improve on it.
#[test]
fn no_improvement_in_the_shot_noise_regime() {
    let start = Instant::now();
    let windows = simulate_windows(&noisy_source(0.0), 1.0, 3000.0, 2.0, 2000, 202).unwrap();
    let stats = noise_stats(&windows).unwrap();
    let raw_ratio = stats.std_raw / stats.shot_noise_level;
    let rescaled_ratio = stats.std_rescaled / stats.shot_noise_level;
    let elapsed = start.elapsed().as_secs_f64();

    let pass =
        (0.9..=1.1).contains(&raw_ratio) && rescaled_ratio >= raw_ratio - 0.05 && elapsed < 30.0;
    let metrics = format!(
        "raw/shot = {raw_ratio:.3} (need 0.9..1.1), rescaled/shot = {rescaled_ratio:.3} \
         (need >= raw - 0.05), {elapsed:.1} s (< 30)"
    );
    report("no improvement in the shot-noise regime", pass, &metrics);
    assert!(pass, "{metrics}");
}

/// Pearson correlation between the arms: strong when a common gain
/// fluctuation drives both, near zero when only independent shot noise
/// remains.
#[test]
fn arm_correlation_strength() {
    let start = Instant::now();
    let noisy = simulate_windows(&noisy_source(0.1), 1.0, 3000.0, 2.0, 2000, 203).unwrap();
    let quiet = simulate_windows(&noisy_source(0.0), 1.0, 3000.0, 2.0, 2000, 203).unwrap();
    let r_noisy = correlation_fit(&noisy).unwrap().pearson_r;
    let r_quiet = correlation_fit(&quiet).unwrap().pearson_r;
    let elapsed = start.elapsed().as_secs_f64();

    let pass = r_noisy > 0.8 && r_quiet.abs() < 0.1 && elapsed < 30.0;
    let metrics = format!(
        "r(sigma 0.1) = {r_noisy:.3} (need > 0.8), r(sigma 0) = {r_quiet:.3} \
         (need |r| < 0.1), {elapsed:.1} s (< 30)"
    );
    report("arm correlation strength", pass, &metrics);
    assert!(pass, "{metrics}");
}

/// A source with nothing but uniform dark counts, gated by a 150 ns
/// window in the 25 us pulse period over one million cycles: the retained
/// fraction must equal the 6e-3 duty factor within 10%.
#[test]
fn background_suppression_by_time_gating() {
    let start = Instant::now();
    let cfg = SourceConfig {
        mean_pairs_per_pulse: 0.0,
        dark_rate_signal_hz: 100_000.0,
        dark_rate_idler_hz: 100_000.0,
        ..SourceConfig::default()
    };
    // 25 s at 40 kHz = 1e6 cycles.
    let bytes = simulate_stream(&cfg, 1.0, 3000.0, 25.0, 25.0, 204).unwrap();
    let (_, records) = decode_stream(&bytes).unwrap();
    let total_darks = records
        .iter()
        .filter(|r| r.channel != Channel::Trigger)
        .count();

    let split = split_by_trigger(&records).unwrap();
    let gate = GateWindow {
        start_ps: 0,
        width_ps: 150_000,
    };
    let gated = gated_counts(
        &split.cycles,
        gate,
        gate,
        25.0,
        3000.0,
        PointKind::Reference,
    )
    .unwrap();
    let retained: u64 = gated.windows.iter().map(|w| w.n_signal + w.n_idler).sum();
    let fraction = retained as f64 / total_darks as f64;
    let elapsed = start.elapsed().as_secs_f64();

    let pass = (fraction - 6e-3).abs() <= 0.1 * 6e-3 && elapsed < 20.0;
    let metrics = format!(
        "retained {retained} of {total_darks} darks = {fraction:.4e} \
         (need 6e-3 +- 10%), {elapsed:.1} s (< 20)"
    );
    report("background suppression by time gating", pass, &metrics);
    assert!(pass, "{metrics}");
}

fn spectrum_through_model(
    model: &CalibrationModel,
    noise: Option<(f64, u64)>,
) -> (TransmissionSpectrum, TransmissionSpectrum) {
    use hyperspec_core::rng::{domain, substream};
    use rand_distr::{Distribution, Poisson};

    let curve = materials::calibration_target();
    let reference = TransmissionSpectrum::new(
        curve
            .points()
            .iter()
            .map(|&(w, od)| SpectrumPoint {
                wavelength_nm: w,
                transmission: (-od).exp(),
                uncertainty: 0.0,
            })
            .collect(),
        SpectrumSource::Ftir,
    )
    .unwrap();
    let measured = TransmissionSpectrum::new(
        (0..100u64)
            .map(|k| {
                let w = 2900.0 + 7.0 * k as f64;
                let od = curve.optical_depth(model.map_wavelength(w)).unwrap();
                let t_true = (-model.r * od).exp();
                let t = match noise {
                    None => t_true,
                    Some((counts, seed)) => {
                        let mut rng = substream(seed, &[domain::WINDOW, k]);
                        let sample = Poisson::new(counts * t_true).unwrap().sample(&mut rng);
                        let reference = Poisson::new(counts).unwrap().sample(&mut rng);
                        sample / reference
                    }
                };
                SpectrumPoint {
                    wavelength_nm: w,
                    transmission: t,
                    uncertainty: 0.0,
                }
            })
            .collect(),
        SpectrumSource::SinglePhoton,
    )
    .unwrap();
    (measured, reference)
}

/// Fit recovery of (scale, offset, thickness) = (1.01, -5 nm, 1.4) from a
/// 100-point synthetic spectrum: every parameter within 0.1% noiseless
/// and within 2% under Poisson noise at 1e4 counts/point.
#[test]
fn calibration_recovery() {
    let start = Instant::now();
    let truth = CalibrationModel {
        a: 1.01,
        b_nm: -5.0,
        r: 1.4,
    };

    let (measured, reference) = spectrum_through_model(&truth, None);
    let clean = fit_calibration(&measured, &reference).unwrap().model;
    let clean_err = [
        (clean.a - truth.a).abs() / truth.a,
        (clean.b_nm - truth.b_nm).abs() / truth.b_nm.abs(),
        (clean.r - truth.r).abs() / truth.r,
    ];

    let (measured, reference) = spectrum_through_model(&truth, Some((1e4, 205)));
    let noisy = fit_calibration(&measured, &reference).unwrap().model;
    let noisy_err = [
        (noisy.a - truth.a).abs() / truth.a,
        (noisy.b_nm - truth.b_nm).abs() / truth.b_nm.abs(),
        (noisy.r - truth.r).abs() / truth.r,
    ];
    let elapsed = start.elapsed().as_secs_f64();

    let pass = clean_err.iter().all(|&e| e < 1e-3)
        && noisy_err.iter().all(|&e| e < 0.02)
        && elapsed < 10.0;
    let metrics = format!(
        "noiseless rel err (a, b, r) = ({:.1e}, {:.1e}, {:.1e}) (need < 1e-3), \
         noisy = ({:.1e}, {:.1e}, {:.1e}) (need < 2e-2), {elapsed:.1} s (< 10)",
        clean_err[0], clean_err[1], clean_err[2], noisy_err[0], noisy_err[1], noisy_err[2]
    );
    report("calibration recovery", pass, &metrics);
    assert!(pass, "{metrics}");
}

/// Pair-generation energy conservation: the stated signal tuning edges
/// map to the stated mid-infrared range, and the relation inverts to
/// floating-point accuracy.
#[test]
fn energy_conservation_wavelength_relations() {
    let short = idler_wavelength(1510.0, 1064.0).unwrap();
    let long = idler_wavelength(1683.0, 1064.0).unwrap();
    let round_trip = signal_wavelength(idler_wavelength(1510.0, 1064.0).unwrap(), 1064.0).unwrap();
    let rel = (round_trip - 1510.0).abs() / 1510.0;

    let pass = (short - 3602.3).abs() <= 0.1 && (long - 2892.9).abs() <= 0.1 && rel < 1e-12;
    let metrics = format!(
        "idler(1510) = {short:.2} nm (need 3602.3 +- 0.1), idler(1683) = {long:.2} nm \
         (need 2892.9 +- 0.1), round trip rel err {rel:.1e} (< 1e-12)"
    );
    report("energy-conservation wavelength relations", pass, &metrics);
    assert!(pass, "{metrics}");
}

fn region_truth(phantom: &Phantom, region: PixelRegion, plane: usize) -> f64 {
    let w = phantom.wavelengths_nm()[plane];
    let mut sum = 0.0;
    let mut n = 0usize;
    for iy in region.y0..region.y0 + region.height {
        for ix in region.x0..region.x0 + region.width {
            sum += phantom.transmission(ix, iy, w).unwrap();
            n += 1;
        }
    }
    sum / n as f64
}

fn region_mean_of_image(values: &[f64], mask: &[bool], nx: usize, region: PixelRegion) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for iy in region.y0..region.y0 + region.height {
        for ix in region.x0..region.x0 + region.width {
            let idx = iy * nx + ix;
            assert!(mask[idx], "masked pixel ({ix}, {iy}) in contrast region");
            sum += values[idx];
            n += 1;
        }
    }
    sum / n as f64
}

/// Full synthetic experiment on a 16x16 grid with 5 planes, two films,
/// and 0.005/s source drift, single-threaded: assembled region means
/// within 5% of the phantom, contrast means within 5% of truth, and the
/// extracted region spectrum within 0.03 RMS.
#[test]
fn end_to_end_phantom_experiment() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let demo_report = pool.install(|| run_demo(dir.path(), 207)).unwrap();

    let phantom = io::read_phantom(&dir.path().join("phantom.csv")).unwrap();
    let cube = io::read_cube(&dir.path().join("cube")).unwrap();
    let disk = PixelRegion {
        x0: 9,
        y0: 9,
        width: 3,
        height: 3,
    };
    let background = PixelRegion {
        x0: 2,
        y0: 2,
        width: 3,
        height: 3,
    };

    // Region means per plane against the phantom.
    let mut worst_region_err = 0.0f64;
    for (region, label) in [(disk, "disk"), (background, "background")] {
        let spectrum = extract_spectrum(&cube, region).unwrap();
        assert_eq!(
            spectrum.points().len(),
            phantom.wavelengths_nm().len(),
            "{label}"
        );
        for (plane, point) in spectrum.points().iter().enumerate() {
            let truth = region_truth(&phantom, region, plane);
            worst_region_err = worst_region_err.max((point.transmission - truth).abs() / truth);
        }
    }

    // Contrast image between the two chosen planes, per region.
    let image = contrast_image(
        &cube,
        demo_report.cube.contrast_wavelength_a_nm,
        demo_report.cube.contrast_wavelength_b_nm,
        ContrastMode::Difference,
    )
    .unwrap();
    let plane_a = phantom
        .wavelengths_nm()
        .iter()
        .position(|&w| w == 3420.0)
        .unwrap();
    let plane_b = phantom
        .wavelengths_nm()
        .iter()
        .position(|&w| w == 3100.0)
        .unwrap();
    let mut worst_contrast_err = 0.0f64;
    for region in [disk, background] {
        let measured = region_mean_of_image(&image.values, &image.mask, cube.nx, region);
        let truth =
            region_truth(&phantom, region, plane_a) - region_truth(&phantom, region, plane_b);
        worst_contrast_err = worst_contrast_err.max((measured - truth).abs() / truth.abs());
    }

    // RMS error of the extracted disk spectrum against the phantom.
    let spectrum = extract_spectrum(&cube, disk).unwrap();
    let rms = (spectrum
        .points()
        .iter()
        .enumerate()
        .map(|(plane, p)| (p.transmission - region_truth(&phantom, disk, plane)).powi(2))
        .sum::<f64>()
        / spectrum.points().len() as f64)
        .sqrt();

    let elapsed = start.elapsed().as_secs_f64();
    let pass =
        worst_region_err < 0.05 && worst_contrast_err < 0.05 && rms < 0.03 && elapsed < 300.0;
    let metrics = format!(
        "worst region mean err {worst_region_err:.3} (< 0.05), worst contrast err \
         {worst_contrast_err:.3} (< 0.05), spectrum rms {rms:.4} (< 0.03), \
         {elapsed:.1} s single-threaded (< 300)"
    );
    report("end-to-end phantom experiment", pass, &metrics);
    assert!(pass, "{metrics}");
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|name| {
            let bytes = fs::read(dir.join(&name)).unwrap();
            (name, bytes)
        })
        .collect()
}

/// The full experiment rerun with the same seed on one thread and on
/// eight must produce byte-identical cube directories.
#[test]
fn determinism_across_parallelism() {
    let dir_single = tempfile::tempdir().unwrap();
    let dir_parallel = tempfile::tempdir().unwrap();

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_demo(dir_single.path(), 207))
        .unwrap();
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(8)
        .build()
        .unwrap()
        .install(|| run_demo(dir_parallel.path(), 207))
        .unwrap();

    assert_eq!(single, parallel, "reports differ between thread counts");
    let cube_single = dir_bytes(&dir_single.path().join("cube"));
    let cube_parallel = dir_bytes(&dir_parallel.path().join("cube"));
    let file_count = cube_single.len();
    let pass = cube_single == cube_parallel && file_count >= 7;
    let metrics =
        format!("{file_count} cube files byte-identical between 1 and 8 threads (same seed)");
    report("determinism across parallelism", pass, &metrics);
    assert!(pass, "{metrics}");
}

/// Noiseless counts under a linear multiplicative drift, pushed through
/// scan assembly with bracketing references, must come back as the exact
/// sample transmissions: the linear interpolation between the reference
/// blocks reproduces the drift law algebraically.
#[test]
fn drift_correction_exactness() {
    let plan = ScanPlan {
        extent_x_um: 25.0,
        extent_y_um: 25.0,
        step_um: 25.0,
        wavelengths_nm: vec![3000.0, 3100.0],
        dwell_s: 1.0,
        reference_windows: 1,
    };
    assert_eq!((plan.nx(), plan.ny()), (2, 2));

    // Transmissions are powers of two and the base level is 2^20, so every
    // simulated count B*T*(1 + t/2) is an exact integer and every float
    // product below is exact.
    let slope = 0.5;
    let base = (1u64 << 20) as f64;
    let t_of = |ix: usize, iy: usize| match (ix, iy) {
        (0, 0) => 1.0,
        (1, 0) => 0.5,
        (1, 1) => 0.25,
        (0, 1) => 0.125,
        _ => unreachable!(),
    };

    let mut points = Vec::new();
    for plane in 0..plan.wavelengths_nm.len() {
        let wavelength_nm = plan.wavelengths_nm[plane];
        let mut push = |j: usize, transmission: f64, point: PointKind| {
            let t_s = (plane * 6 + j) as f64;
            let counts = base * transmission * (1.0 + slope * t_s);
            assert_eq!(counts.fract(), 0.0, "construction must be exact");
            points.push(RawPoint {
                plane,
                t_s,
                counts: WindowCounts {
                    n_signal: 1,
                    n_idler: counts as u64,
                    window_duration_s: plan.dwell_s,
                    wavelength_nm,
                    point,
                },
            });
        };
        push(0, 1.0, PointKind::Reference);
        for (j, (ix, iy)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
            push(j + 1, t_of(ix, iy), PointKind::Pixel { ix, iy });
        }
        push(5, 1.0, PointKind::Reference);
    }
    let scan = RawScan { plan, points };

    let cube = assemble_cube(&scan, &CalibrationModel::identity(), false).unwrap();
    let mut worst = 0.0f64;
    for plane in 0..2 {
        for iy in 0..2 {
            for ix in 0..2 {
                let value = cube.value(ix, iy, plane).unwrap();
                let rel = (value - t_of(ix, iy)).abs() / t_of(ix, iy);
                worst = worst.max(rel);
            }
        }
    }

    let pass = worst < 1e-12;
    let metrics =
        format!("max relative error {worst:.2e} after removing a 0.5/s drift (need < 1e-12)");
    report("drift-correction exactness", pass, &metrics);
    assert!(pass, "{metrics}");
}

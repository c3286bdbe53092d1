//! Correlation-based suppression of source excess noise.
//!
//! Signal and idler photons are born in pairs, so intensity fluctuations of
//! the pump modulate both detected count series together. The idler count
//! of window `w` is rescaled by the batch-mean signal count,
//!
//! ```text
//! corrected_w = n_idler_w · ⟨n_signal⟩ / n_signal_w
//! ```
//!
//! which cancels the common multiplicative noise while leaving the mean
//! untouched. The residual floor is set by the two channels' shot noise,
//! `⟨n_idler⟩·sqrt(1/⟨n_idler⟩ + 1/⟨n_signal⟩)`, so rescaling only helps
//! when excess-noise variance exceeds the signal channel's shot-noise
//! contribution. [`noise_stats`] summarizes a window batch against its
//! shot-noise level, [`correlation_fit`] quantifies the channel coupling,
//! and [`fwhm`] measures distribution widths for before/after comparisons.

use crate::sim::WindowCounts;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelationError {
    #[error("need at least {need} windows, got {got}")]
    InsufficientWindows { need: usize, got: usize },
    #[error("every window has zero signal counts; nothing to rescale against")]
    AllWindowsExcluded,
    #[error("signal counts have zero variance; correlation fit is degenerate")]
    ZeroSignalVariance,
    #[error("need at least {need} values for a width estimate, got {got}")]
    InsufficientValues { need: usize, got: usize },
}

/// Output of [`rescale_idler`].
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledBatch {
    /// Rescaled idler counts, one per retained window, in input order.
    pub values: Vec<f64>,
    /// Indices (into the input batch) of the retained windows.
    pub retained: Vec<usize>,
    /// Indices of windows excluded for `n_signal == 0`.
    pub excluded: Vec<usize>,
    /// Mean signal count over the retained windows.
    pub mean_signal: f64,
}

/// Noise summary of one window batch at a single wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub wavelength_nm: f64,
    pub mean_idler: f64,
    /// Sample standard deviation (n−1) of the raw idler counts.
    pub std_raw: f64,
    /// Sample standard deviation (n−1) of the rescaled idler counts.
    pub std_rescaled: f64,
    /// `sqrt(mean_idler)`: the Poisson floor a noiseless source would show.
    pub shot_noise_level: f64,
}

/// Ordinary least-squares fit of idler counts against signal counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation with the n−1 denominator.
fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Applies the correlation rescaling to a batch of windows. Windows with
/// zero signal counts cannot be normalized; they are excluded and reported.
/// The batch mean `⟨n_signal⟩` is taken over the retained windows only.
pub fn rescale_idler(windows: &[WindowCounts]) -> Result<RescaledBatch, CorrelationError> {
    if windows.len() < 2 {
        return Err(CorrelationError::InsufficientWindows {
            need: 2,
            got: windows.len(),
        });
    }
    let mut retained = Vec::with_capacity(windows.len());
    let mut excluded = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        if w.n_signal == 0 {
            excluded.push(i);
        } else {
            retained.push(i);
        }
    }
    if retained.is_empty() {
        return Err(CorrelationError::AllWindowsExcluded);
    }
    let mean_signal = retained
        .iter()
        .map(|&i| windows[i].n_signal as f64)
        .sum::<f64>()
        / retained.len() as f64;
    let values = retained
        .iter()
        .map(|&i| windows[i].n_idler as f64 * mean_signal / windows[i].n_signal as f64)
        .collect();
    Ok(RescaledBatch {
        values,
        retained,
        excluded,
        mean_signal,
    })
}

/// Computes raw and rescaled noise levels of a batch against its shot-noise
/// floor. The wavelength is taken from the first window.
pub fn noise_stats(windows: &[WindowCounts]) -> Result<NoiseStats, CorrelationError> {
    if windows.len() < 2 {
        return Err(CorrelationError::InsufficientWindows {
            need: 2,
            got: windows.len(),
        });
    }
    let rescaled = rescale_idler(windows)?;
    if rescaled.values.len() < 2 {
        return Err(CorrelationError::InsufficientWindows {
            need: 2,
            got: rescaled.values.len(),
        });
    }
    let raw: Vec<f64> = windows.iter().map(|w| w.n_idler as f64).collect();
    let mean_idler = mean(&raw);
    Ok(NoiseStats {
        wavelength_nm: windows[0].wavelength_nm,
        mean_idler,
        std_raw: sample_std(&raw),
        std_rescaled: sample_std(&rescaled.values),
        shot_noise_level: mean_idler.sqrt(),
    })
}

/// Least-squares line `n_idler = slope·n_signal + intercept` with Pearson
/// correlation. Requires at least 3 windows and nonconstant signal counts;
/// constant idler counts yield `pearson_r = 0`.
pub fn correlation_fit(windows: &[WindowCounts]) -> Result<CorrelationFit, CorrelationError> {
    if windows.len() < 3 {
        return Err(CorrelationError::InsufficientWindows {
            need: 3,
            got: windows.len(),
        });
    }
    let xs: Vec<f64> = windows.iter().map(|w| w.n_signal as f64).collect();
    let ys: Vec<f64> = windows.iter().map(|w| w.n_idler as f64).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(CorrelationError::ZeroSignalVariance);
    }
    let slope = sxy / sxx;
    Ok(CorrelationFit {
        slope,
        intercept: my - slope * mx,
        pearson_r: if syy == 0.0 {
            0.0
        } else {
            sxy / (sxx * syy).sqrt()
        },
    })
}

/// Full width at half maximum of a value distribution, in the units of the
/// values. The distribution is binned with Sturges' rule
/// (`ceil(log2 n) + 1` bins); the half-maximum crossings on both sides of
/// the mode are located by linear interpolation between bin centers, falling
/// back to the histogram edge when a side never drops below half. A batch of
/// identical values has zero width.
pub fn fwhm(values: &[f64]) -> Result<f64, CorrelationError> {
    if values.len() < 10 {
        return Err(CorrelationError::InsufficientValues {
            need: 10,
            got: values.len(),
        });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(0.0);
    }

    let n_bins = (values.len() as f64).log2().ceil() as usize + 1;
    let width = (hi - lo) / n_bins as f64;
    let mut bins = vec![0u64; n_bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(n_bins - 1);
        bins[k] += 1;
    }

    let peak = (0..n_bins)
        .max_by_key(|&k| (bins[k], std::cmp::Reverse(k)))
        .unwrap();
    let half = bins[peak] as f64 / 2.0;
    let center = |k: usize| lo + (k as f64 + 0.5) * width;

    // Walk outward from the mode until the counts drop below half-max,
    // then interpolate the crossing position.
    let left = (0..peak)
        .rev()
        .find(|&k| (bins[k] as f64) < half)
        .map(|k| {
            let (c0, c1) = (bins[k] as f64, bins[k + 1] as f64);
            center(k) + (half - c0) / (c1 - c0) * width
        })
        .unwrap_or(lo);
    let right = (peak + 1..n_bins)
        .find(|&k| (bins[k] as f64) < half)
        .map(|k| {
            let (c0, c1) = (bins[k - 1] as f64, bins[k] as f64);
            center(k - 1) + (c0 - half) / (c0 - c1) * width
        })
        .unwrap_or(hi);

    Ok(right - left)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};
    use crate::sim::{simulate_windows, PointKind, SourceConfig};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn batch(pairs: &[(u64, u64)]) -> Vec<WindowCounts> {
        pairs
            .iter()
            .map(|&(n_signal, n_idler)| WindowCounts {
                n_signal,
                n_idler,
                window_duration_s: 2.0,
                wavelength_nm: 3000.0,
                point: PointKind::Reference,
            })
            .collect()
    }

    fn noisy_batch(sigma_g: f64, n: usize, seed: u64) -> Vec<WindowCounts> {
        let cfg = SourceConfig {
            excess_noise_sigma: sigma_g,
            ..SourceConfig::default()
        };
        simulate_windows(&cfg, 1.0, 3000.0, 2.0, n, seed).unwrap()
    }

    #[test]
    fn constant_signal_leaves_idler_unchanged() {
        let windows = batch(&[(10, 5), (10, 7), (10, 9)]);
        let out = rescale_idler(&windows).unwrap();
        assert_eq!(out.values, vec![5.0, 7.0, 9.0]);
        assert_eq!(out.retained, vec![0, 1, 2]);
        assert!(out.excluded.is_empty());
    }

    #[test]
    fn proportional_channels_collapse_to_the_mean() {
        // Signal [10, 20], idler [100, 200]: ⟨n_signal⟩ = 15 maps both
        // windows to 150.
        let windows = batch(&[(10, 100), (20, 200)]);
        let out = rescale_idler(&windows).unwrap();
        assert_eq!(out.values, vec![150.0, 150.0]);
        assert_eq!(out.mean_signal, 15.0);
    }

    #[test]
    fn zero_signal_windows_are_excluded_and_reported() {
        let windows = batch(&[(10, 100), (0, 120), (10, 80)]);
        let out = rescale_idler(&windows).unwrap();
        assert_eq!(out.retained, vec![0, 2]);
        assert_eq!(out.excluded, vec![1]);
        assert_eq!(out.values.len(), 2);
    }

    #[test]
    fn all_zero_signal_batch_errors() {
        let windows = batch(&[(0, 100), (0, 120)]);
        assert_eq!(
            rescale_idler(&windows),
            Err(CorrelationError::AllWindowsExcluded)
        );
    }

    #[test]
    fn deterministic_common_gain_cancels_exactly() {
        // n_signal = g·10, n_idler = g·5 for gains {1, 2, 3}: every
        // rescaled value equals 5·mean(g) = 10 exactly.
        let windows = batch(&[(10, 5), (20, 10), (30, 15)]);
        let out = rescale_idler(&windows).unwrap();
        assert_eq!(out.values, vec![10.0, 10.0, 10.0]);
    }

    #[test]
    fn constant_idler_has_zero_std_and_matching_shot_level() {
        let windows = batch(&[(10, 100), (10, 100), (10, 100), (10, 100)]);
        let stats = noise_stats(&windows).unwrap();
        assert_eq!(stats.std_raw, 0.0);
        assert_eq!(stats.std_rescaled, 0.0);
        assert_eq!(stats.mean_idler, 100.0);
        assert_eq!(stats.shot_noise_level, 10.0);
        assert_eq!(stats.shot_noise_level, stats.mean_idler.sqrt());
    }

    #[test]
    fn poisson_batch_sits_at_the_shot_noise_level() {
        let stats = noise_stats(&noisy_batch(0.0, 2000, 11)).unwrap();
        let ratio = stats.std_raw / stats.shot_noise_level;
        assert!(
            (0.9..1.1).contains(&ratio),
            "raw/shot = {ratio} outside [0.9, 1.1]"
        );
    }

    #[test]
    fn excess_noise_batch_shows_super_poissonian_raw_noise() {
        let stats = noise_stats(&noisy_batch(0.05, 2000, 12)).unwrap();
        assert!(
            stats.std_raw > 3.0 * stats.shot_noise_level,
            "raw std {} vs shot {}",
            stats.std_raw,
            stats.shot_noise_level
        );
    }

    #[test]
    fn rescaling_lands_on_the_propagated_floor() {
        // Monte Carlo against the error-propagation floor. With shared pair
        // numbers the idler and signal Poisson parts are weakly correlated,
        // so the floor is
        //   ⟨n_i⟩·sqrt(1/⟨n_i⟩ + 1/⟨n_s⟩ − 2/pairs).
        let stats = noise_stats(&noisy_batch(0.05, 2000, 13)).unwrap();
        let (mean_i, mean_s, pairs) = (10_400.0_f64, 2_400.0_f64, 80_000.0_f64);
        let floor = mean_i * (1.0 / mean_i + 1.0 / mean_s - 2.0 / pairs).sqrt();
        assert!(stats.std_rescaled < stats.std_raw);
        assert!(
            (stats.std_rescaled - floor).abs() / floor < 0.10,
            "rescaled std {} vs floor {floor}",
            stats.std_rescaled
        );
    }

    #[test]
    fn rescaling_only_helps_when_excess_noise_dominates() {
        // Pure Poisson input: the signal channel's shot noise makes the
        // rescaled series noisier than the raw one.
        let poisson = noise_stats(&noisy_batch(0.0, 2000, 14)).unwrap();
        assert!(poisson.std_rescaled > poisson.std_raw);
        // Strong excess noise: rescaling wins.
        let noisy = noise_stats(&noisy_batch(0.05, 2000, 14)).unwrap();
        assert!(noisy.std_rescaled < noisy.std_raw);
    }

    #[test]
    fn rescaling_preserves_the_mean() {
        let windows = noisy_batch(0.05, 2000, 15);
        let out = rescale_idler(&windows).unwrap();
        let raw: Vec<f64> = out
            .retained
            .iter()
            .map(|&i| windows[i].n_idler as f64)
            .collect();
        let n = raw.len() as f64;
        let se = |v: &[f64]| sample_std(v) / n.sqrt();
        let combined = (se(&raw).powi(2) + se(&out.values).powi(2)).sqrt();
        let delta = (mean(&out.values) - mean(&raw)).abs();
        assert!(
            delta <= 3.0 * combined,
            "means differ by {delta}, combined se {combined}"
        );
    }

    #[test]
    fn exact_line_is_recovered() {
        let windows = batch(&[(1, 2), (2, 4), (3, 6)]);
        let fit = correlation_fit(&windows).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!((fit.pearson_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_fit_is_degenerate() {
        let windows = batch(&[(5, 2), (5, 4), (5, 6)]);
        assert_eq!(
            correlation_fit(&windows),
            Err(CorrelationError::ZeroSignalVariance)
        );
    }

    #[test]
    fn correlated_channels_show_strong_pearson_r() {
        let fit = correlation_fit(&noisy_batch(0.1, 2000, 16)).unwrap();
        assert!(fit.pearson_r > 0.8, "r = {}", fit.pearson_r);
    }

    #[test]
    fn near_independent_channels_show_weak_pearson_r() {
        // Without excess noise the only coupling is the shared pair count,
        // giving r ≈ sqrt(η_s·η_i) ≈ 0.06.
        let fit = correlation_fit(&noisy_batch(0.0, 2000, 17)).unwrap();
        assert!(fit.pearson_r.abs() < 0.1, "r = {}", fit.pearson_r);
    }

    #[test]
    fn gaussian_fwhm_matches_2_355_sigma() {
        let normal = Normal::new(0.0, 10.0).unwrap();
        let mut rng = substream(18, &[domain::WINDOW, 99]);
        let values: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let width = fwhm(&values).unwrap();
        let expected = 2.0 * (2.0f64.ln() * 2.0).sqrt() * 10.0; // 23.548
        assert!(
            (width - expected).abs() / expected < 0.05,
            "fwhm {width} vs {expected}"
        );
    }

    #[test]
    fn identical_values_have_zero_width() {
        assert_eq!(fwhm(&[7.0; 64]).unwrap(), 0.0);
    }

    #[test]
    fn fwhm_requires_enough_values() {
        assert_eq!(
            fwhm(&[1.0; 9]),
            Err(CorrelationError::InsufficientValues { need: 10, got: 9 })
        );
    }

    #[test]
    fn rescaled_distribution_is_narrower_under_excess_noise() {
        let windows = noisy_batch(0.05, 2000, 19);
        let raw: Vec<f64> = windows.iter().map(|w| w.n_idler as f64).collect();
        let rescaled = rescale_idler(&windows).unwrap().values;
        assert!(fwhm(&rescaled).unwrap() < fwhm(&raw).unwrap());
    }

    proptest! {
        /// A deterministic common gain applied to both channels rescales to
        /// a constant series when the underlying per-window rates are
        /// constant. Power-of-two gains keep every float operation exact,
        /// so constancy must be bit-exact there; arbitrary integer gains
        /// are allowed rounding at the last ulp.
        #[test]
        fn common_gain_cancellation_is_exact(
            exponents in prop::collection::vec(0u32..10, 2..40),
            gains in prop::collection::vec(1u64..1000, 2..40),
            base_signal in 1u64..50,
            base_idler in 1u64..50,
        ) {
            let pow2 = batch(
                &exponents
                    .iter()
                    .map(|&e| ((1u64 << e) * base_signal, (1u64 << e) * base_idler))
                    .collect::<Vec<_>>(),
            );
            let out = rescale_idler(&pow2).unwrap();
            let first = out.values[0];
            prop_assert!(out.values.iter().all(|&v| v == first));

            let general = batch(
                &gains
                    .iter()
                    .map(|&g| (g * base_signal, g * base_idler))
                    .collect::<Vec<_>>(),
            );
            let out = rescale_idler(&general).unwrap();
            let first = out.values[0];
            prop_assert!(out
                .values
                .iter()
                .all(|&v| (v - first).abs() <= 1e-12 * first.abs()));
        }
    }
}

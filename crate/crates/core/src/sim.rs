//! Synthetic correlated photon-pair source and sample scanner.
//!
//! The model follows the physics of a pulsed twin-beam source: each pump
//! pulse produces a Poisson-distributed number of signal/idler pairs, the
//! per-window mean flux fluctuates with a slowly varying multiplicative
//! gain (pump power and alignment drift), and each arm thins the pair
//! stream through its chain efficiency. The idler arm additionally passes
//! through the sample, so its thinning probability carries the sample
//! transmission:
//!
//! ```text
//! g        ~ max(0, Normal(1, σ_g))                   (per counting window)
//! pairs    ~ Poisson(g · μ · f_rep · T_window · p(λ)) (per counting window)
//! n_signal ~ Binomial(pairs, η_s)        + Poisson(dark_s · T_window)
//! n_idler  ~ Binomial(pairs, T(λ) · η_i) + Poisson(dark_i · T_window)
//! ```
//!
//! Because both arms thin the *same* pair number, `n_signal` carries a live
//! record of the source fluctuation that corrupted `n_idler` — that shared
//! dependence is what the correlation stage exploits.
//!
//! Three granularities are provided: single counting windows
//! ([`simulate_window`], [`simulate_windows`]), full time-tag streams with
//! per-pulse arrival times ([`simulate_stream`]), and whole raster scans of
//! a sample phantom across many probe wavelengths ([`simulate_scan`]).
//! All of them derive every random draw from counter-based substreams of
//! one master seed, so results are reproducible regardless of thread count
//! or call order.
//!
//! Dark counts: the stream simulator spreads darks uniformly over the
//! pulse period, so downstream time-gating suppresses them by the duty
//! cycle. The window simulators have no time axis; their dark rates are
//! added directly, so pass the post-gating effective rate when comparing
//! the two paths.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypercube::{serpentine_pixels, HypercubeError, ScanPlan};
use crate::rng::{domain, substream};
use crate::timetag::{encode_stream, Channel, StreamError, StreamHeader, TimeTagRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid source configuration: {0}")]
    Config(String),
    #[error(
        "wavelength {wavelength_nm} nm is outside the conversion profile domain [{lo}, {hi}] nm"
    )]
    OutsideProfile {
        wavelength_nm: f64,
        lo: f64,
        hi: f64,
    },
    #[error("phantom defines no transmission at pixel ({ix}, {iy}) for {wavelength_nm} nm")]
    PhantomMissing {
        ix: usize,
        iy: usize,
        wavelength_nm: f64,
    },
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Plan(#[from] HypercubeError),
}

// ============================================================================
// Configuration
// ============================================================================

/// Relative pair-generation efficiency versus idler wavelength, linearly
/// interpolated between control points. Captures the phase-matching rolloff
/// of the nonlinear crystal across the tuning range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ConversionProfile {
    points: Vec<(f64, f64)>,
}

impl ConversionProfile {
    pub fn new(points: Vec<(f64, f64)>) -> Result<ConversionProfile, SimError> {
        if points.is_empty() {
            return Err(SimError::Config("conversion profile has no points".into()));
        }
        for (i, &(w, v)) in points.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(SimError::Config(format!(
                    "conversion profile wavelength {w} must be positive"
                )));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Config(format!(
                    "conversion profile value {v} at {w} nm must be non-negative"
                )));
            }
            if i > 0 && w <= points[i - 1].0 {
                return Err(SimError::Config(format!(
                    "conversion profile wavelengths must be strictly increasing at index {i}"
                )));
            }
        }
        Ok(ConversionProfile { points })
    }

    /// Unit efficiency everywhere on `[lo, hi]`.
    pub fn flat(lo_nm: f64, hi_nm: f64) -> ConversionProfile {
        ConversionProfile {
            points: vec![(lo_nm, 1.0), (hi_nm, 1.0)],
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    /// Linear interpolation; wavelengths outside the domain are an error.
    pub fn value_at(&self, wavelength_nm: f64) -> Result<f64, SimError> {
        let (lo, hi) = self.domain();
        if !(wavelength_nm >= lo && wavelength_nm <= hi) {
            return Err(SimError::OutsideProfile {
                wavelength_nm,
                lo,
                hi,
            });
        }
        let idx = self
            .points
            .partition_point(|&(w, _)| w <= wavelength_nm)
            .min(self.points.len() - 1);
        if idx == 0 {
            return Ok(self.points[0].1);
        }
        let (w0, v0) = self.points[idx - 1];
        let (w1, v1) = self.points[idx];
        if wavelength_nm == w0 {
            return Ok(v0);
        }
        Ok(v0 + (wavelength_nm - w0) / (w1 - w0) * (v1 - v0))
    }
}

impl TryFrom<Vec<[f64; 2]>> for ConversionProfile {
    type Error = SimError;

    fn try_from(points: Vec<[f64; 2]>) -> Result<ConversionProfile, SimError> {
        ConversionProfile::new(points.into_iter().map(|[w, v]| (w, v)).collect())
    }
}

impl From<ConversionProfile> for Vec<[f64; 2]> {
    fn from(profile: ConversionProfile) -> Vec<[f64; 2]> {
        profile.points.into_iter().map(|(w, v)| [w, v]).collect()
    }
}

/// Source and detection-chain parameters.
///
/// Chain efficiencies are end-to-end: collection, conversion where
/// applicable, and detector quantum efficiency folded into one thinning
/// probability per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    /// Pump repetition rate in Hz; one counting cycle per pulse.
    pub rep_rate_hz: f64,
    /// Pump pulse duration in ns (descriptive; arrival spread is set by
    /// `jitter_sigma_ns`).
    pub pulse_duration_ns: f64,
    /// Mean photon pairs generated per pump pulse at unit gain and unit
    /// conversion efficiency.
    pub mean_pairs_per_pulse: f64,
    /// Thinning probability of the signal (heralding) arm.
    pub signal_chain_efficiency: f64,
    /// Thinning probability of the idler arm at unit sample transmission.
    pub idler_chain_efficiency: f64,
    /// Signal-arm dark/background rate in Hz.
    pub dark_rate_signal_hz: f64,
    /// Idler-arm dark/background rate in Hz.
    pub dark_rate_idler_hz: f64,
    /// Relative sigma of the per-window multiplicative gain fluctuation.
    pub excess_noise_sigma: f64,
    /// Gaussian sigma of detection arrival times around the offset, in ns.
    pub jitter_sigma_ns: f64,
    /// Mean detection delay after the trigger, in ns.
    pub arrival_offset_ns: f64,
    /// Pair-generation efficiency versus idler wavelength.
    pub conversion_profile: ConversionProfile,
}

impl Default for SourceConfig {
    fn default() -> SourceConfig {
        SourceConfig {
            rep_rate_hz: 40e3,
            pulse_duration_ns: 15.0,
            mean_pairs_per_pulse: 1.0,
            signal_chain_efficiency: 0.03,
            idler_chain_efficiency: 0.13,
            dark_rate_signal_hz: 0.0,
            dark_rate_idler_hz: 0.0,
            excess_noise_sigma: 0.05,
            jitter_sigma_ns: 3.0,
            arrival_offset_ns: 50.0,
            conversion_profile: ConversionProfile::flat(2900.0, 3600.0),
        }
    }
}

impl SourceConfig {
    /// Pulse period in picoseconds, rounded to the stream resolution.
    pub fn pulse_period_ps(&self) -> u64 {
        (1e12 / self.rep_rate_hz).round() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("rep_rate_hz", self.rep_rate_hz),
            ("pulse_duration_ns", self.pulse_duration_ns),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::Config(format!("{name} = {v} must be positive")));
            }
        }
        let non_negative = [
            ("mean_pairs_per_pulse", self.mean_pairs_per_pulse),
            ("dark_rate_signal_hz", self.dark_rate_signal_hz),
            ("dark_rate_idler_hz", self.dark_rate_idler_hz),
            ("excess_noise_sigma", self.excess_noise_sigma),
            ("jitter_sigma_ns", self.jitter_sigma_ns),
            ("arrival_offset_ns", self.arrival_offset_ns),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Config(format!(
                    "{name} = {v} must be non-negative"
                )));
            }
        }
        for (name, v) in [
            ("signal_chain_efficiency", self.signal_chain_efficiency),
            ("idler_chain_efficiency", self.idler_chain_efficiency),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(SimError::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if (self.arrival_offset_ns * 1000.0) as u64 >= self.pulse_period_ps() {
            return Err(SimError::Config(format!(
                "arrival_offset_ns = {} does not fit in the {} ps pulse period",
                self.arrival_offset_ns,
                self.pulse_period_ps()
            )));
        }
        Ok(())
    }
}

// ============================================================================
// Counting windows
// ============================================================================

/// What a counting window was looking at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    /// A pixel of the raster scan.
    Pixel { ix: usize, iy: usize },
    /// A clear-path reference acquisition (no sample).
    Reference,
}

/// Gated coincidence-window totals for one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowCounts {
    pub n_signal: u64,
    pub n_idler: u64,
    pub window_duration_s: f64,
    pub wavelength_nm: f64,
    pub point: PointKind,
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .expect("positive finite Poisson mean")
        .sample(rng) as u64
}

fn sample_binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p)
        .expect("probability in range")
        .sample(rng)
}

/// One counting window. Draw order is fixed (gain, pairs, signal thinning,
/// signal darks, idler thinning, idler darks) so identical substreams give
/// identical counts.
fn draw_window_counts(
    cfg: &SourceConfig,
    mean_pairs_per_pulse: f64,
    transmission: f64,
    profile_value: f64,
    duration_s: f64,
    rng: &mut ChaCha8Rng,
) -> (u64, u64) {
    let gain = Normal::new(1.0, cfg.excess_noise_sigma)
        .expect("validated sigma")
        .sample(rng)
        .max(0.0);
    let mean_pairs = gain * mean_pairs_per_pulse * cfg.rep_rate_hz * duration_s * profile_value;
    let pairs = sample_poisson(rng, mean_pairs);
    let n_signal = sample_binomial(rng, pairs, cfg.signal_chain_efficiency)
        + sample_poisson(rng, cfg.dark_rate_signal_hz * duration_s);
    let n_idler = sample_binomial(
        rng,
        pairs,
        (transmission * cfg.idler_chain_efficiency).min(1.0),
    ) + sample_poisson(rng, cfg.dark_rate_idler_hz * duration_s);
    (n_signal, n_idler)
}

fn check_window_args(
    cfg: &SourceConfig,
    transmission: f64,
    duration_s: f64,
) -> Result<(), SimError> {
    cfg.validate()?;
    if !transmission.is_finite() || !(0.0..=1.0).contains(&transmission) {
        return Err(SimError::Config(format!(
            "transmission = {transmission} must lie in [0, 1]"
        )));
    }
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(SimError::Config(format!(
            "window duration = {duration_s} s must be positive"
        )));
    }
    Ok(())
}

/// Simulates a single counting window through a sample of the given
/// transmission. The result is labeled [`PointKind::Reference`]; scans
/// attach pixel labels themselves.
pub fn simulate_window(
    cfg: &SourceConfig,
    transmission: f64,
    wavelength_nm: f64,
    duration_s: f64,
    seed: u64,
) -> Result<WindowCounts, SimError> {
    let windows = simulate_windows(cfg, transmission, wavelength_nm, duration_s, 1, seed)?;
    Ok(windows[0])
}

/// Simulates `count` consecutive counting windows. Window `w` draws from
/// substream `(seed, WINDOW, w)`, so a shorter run is a prefix of a longer
/// one.
pub fn simulate_windows(
    cfg: &SourceConfig,
    transmission: f64,
    wavelength_nm: f64,
    duration_s: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<WindowCounts>, SimError> {
    check_window_args(cfg, transmission, duration_s)?;
    let profile_value = cfg.conversion_profile.value_at(wavelength_nm)?;
    Ok((0..count)
        .map(|w| {
            let mut rng = substream(seed, &[domain::WINDOW, w as u64]);
            let (n_signal, n_idler) = draw_window_counts(
                cfg,
                cfg.mean_pairs_per_pulse,
                transmission,
                profile_value,
                duration_s,
                &mut rng,
            );
            WindowCounts {
                n_signal,
                n_idler,
                window_duration_s: duration_s,
                wavelength_nm,
                point: PointKind::Reference,
            }
        })
        .collect())
}

// ============================================================================
// Time-tag streams
// ============================================================================

/// Simulates a raw time-tag stream: one trigger per pump pulse plus
/// detection records with jittered arrival times, encoded in the on-disk
/// stream format.
///
/// The gain fluctuation is redrawn once per counting window
/// (`window_duration_s` of pulses), matching the windowing the counting
/// stage will apply. Dark counts are uniform over the pulse period.
/// Detection and dark arrival times are clamped to the period.
pub fn simulate_stream(
    cfg: &SourceConfig,
    transmission: f64,
    wavelength_nm: f64,
    duration_s: f64,
    window_duration_s: f64,
    seed: u64,
) -> Result<Vec<u8>, SimError> {
    check_window_args(cfg, transmission, duration_s)?;
    if !window_duration_s.is_finite() || window_duration_s <= 0.0 {
        return Err(SimError::Config(format!(
            "window duration = {window_duration_s} s must be positive"
        )));
    }
    let profile_value = cfg.conversion_profile.value_at(wavelength_nm)?;

    let period_ps = cfg.pulse_period_ps();
    let period_s = period_ps as f64 * 1e-12;
    let n_cycles = (duration_s * cfg.rep_rate_hz).round() as u64;
    let cycles_per_window = ((window_duration_s * cfg.rep_rate_hz).round() as u64).max(1);
    let idler_p = (transmission * cfg.idler_chain_efficiency).min(1.0);
    let arrival = Normal::new(cfg.arrival_offset_ns * 1000.0, cfg.jitter_sigma_ns * 1000.0)
        .expect("validated sigma");
    let mean_dark_signal = cfg.dark_rate_signal_hz * period_s;
    let mean_dark_idler = cfg.dark_rate_idler_hz * period_s;

    let expected = n_cycles as f64
        * (1.0
            + cfg.mean_pairs_per_pulse * profile_value * (cfg.signal_chain_efficiency + idler_p)
            + mean_dark_signal
            + mean_dark_idler);
    let mut records = Vec::with_capacity(expected as usize + 64);

    let mut rng = substream(seed, &[domain::STREAM, 0]);
    let mut pair_dist: Option<Poisson<f64>> = None;
    for k in 0..n_cycles {
        if k % cycles_per_window == 0 {
            // New counting window: fresh substream and a fresh gain draw.
            rng = substream(seed, &[domain::STREAM, k / cycles_per_window]);
            let gain = Normal::new(1.0, cfg.excess_noise_sigma)
                .expect("validated sigma")
                .sample(&mut rng)
                .max(0.0);
            let mean = gain * cfg.mean_pairs_per_pulse * profile_value;
            pair_dist = (mean > 0.0).then(|| Poisson::new(mean).expect("positive mean"));
        }
        let t0 = k * period_ps;
        records.push(TimeTagRecord {
            channel: Channel::Trigger,
            timestamp_ps: t0,
        });

        let pairs = pair_dist.as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
        let n_signal = sample_binomial(&mut rng, pairs, cfg.signal_chain_efficiency);
        let n_idler = sample_binomial(&mut rng, pairs, idler_p);
        let mut push_arrivals = |rng: &mut ChaCha8Rng, channel: Channel, n: u64| {
            for _ in 0..n {
                let rel = arrival
                    .sample(rng)
                    .round()
                    .clamp(0.0, (period_ps - 1) as f64) as u64;
                records.push(TimeTagRecord {
                    channel,
                    timestamp_ps: t0 + rel,
                });
            }
        };
        push_arrivals(&mut rng, Channel::Signal, n_signal);
        push_arrivals(&mut rng, Channel::Idler, n_idler);
        for (channel, mean_dark) in [
            (Channel::Signal, mean_dark_signal),
            (Channel::Idler, mean_dark_idler),
        ] {
            let darks = sample_poisson(&mut rng, mean_dark);
            for _ in 0..darks {
                records.push(TimeTagRecord {
                    channel,
                    timestamp_ps: t0 + rng.random_range(0..period_ps),
                });
            }
        }
    }

    records.sort_by_key(|r| (r.timestamp_ps, r.channel.as_u16()));
    let header = StreamHeader::new(period_ps);
    Ok(encode_stream(&header, &records)?)
}

// ============================================================================
// Phantoms and scans
// ============================================================================

/// Ground-truth sample: transmission per pixel per probe wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    nx: usize,
    ny: usize,
    wavelengths_nm: Vec<f64>,
    /// Flattened `(iw * ny + iy) * nx + ix`.
    values: Vec<f64>,
}

impl Phantom {
    pub fn new(
        nx: usize,
        ny: usize,
        wavelengths_nm: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Phantom, SimError> {
        if nx == 0 || ny == 0 {
            return Err(SimError::InvalidPhantom("grid must be non-empty".into()));
        }
        if wavelengths_nm.is_empty() {
            return Err(SimError::InvalidPhantom("no wavelengths".into()));
        }
        for (i, &w) in wavelengths_nm.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(SimError::InvalidPhantom(format!(
                    "wavelength {w} must be positive"
                )));
            }
            if i > 0 && w <= wavelengths_nm[i - 1] {
                return Err(SimError::InvalidPhantom(
                    "wavelengths must be strictly increasing".into(),
                ));
            }
        }
        if values.len() != nx * ny * wavelengths_nm.len() {
            return Err(SimError::InvalidPhantom(format!(
                "expected {} values for a {}x{}x{} grid, got {}",
                nx * ny * wavelengths_nm.len(),
                nx,
                ny,
                wavelengths_nm.len(),
                values.len()
            )));
        }
        for &v in &values {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidPhantom(format!(
                    "transmission {v} must lie in [0, 1]"
                )));
            }
        }
        Ok(Phantom {
            nx,
            ny,
            wavelengths_nm,
            values,
        })
    }

    /// Builds a phantom by evaluating `f(ix, iy, wavelength)` on the grid.
    pub fn from_fn(
        nx: usize,
        ny: usize,
        wavelengths_nm: Vec<f64>,
        f: impl Fn(usize, usize, f64) -> f64,
    ) -> Result<Phantom, SimError> {
        let mut values = Vec::with_capacity(nx * ny * wavelengths_nm.len());
        for &w in &wavelengths_nm {
            for iy in 0..ny {
                for ix in 0..nx {
                    values.push(f(ix, iy, w));
                }
            }
        }
        Phantom::new(nx, ny, wavelengths_nm, values)
    }

    /// Builds a phantom from `(ix, iy, wavelength, transmission)` rows in
    /// any order; every pixel/wavelength combination must appear exactly
    /// once.
    pub fn from_points(
        points: impl IntoIterator<Item = (usize, usize, f64, f64)>,
    ) -> Result<Phantom, SimError> {
        let rows: Vec<(usize, usize, f64, f64)> = points.into_iter().collect();
        if rows.is_empty() {
            return Err(SimError::InvalidPhantom("no points".into()));
        }
        let nx = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let ny = rows.iter().map(|r| r.1).max().unwrap() + 1;
        let mut wavelengths: Vec<f64> = rows.iter().map(|r| r.2).collect();
        wavelengths.sort_by(|a, b| a.partial_cmp(b).expect("finite wavelengths"));
        wavelengths.dedup();
        let mut values = vec![f64::NAN; nx * ny * wavelengths.len()];
        for (ix, iy, w, t) in rows {
            let iw = wavelengths
                .binary_search_by(|probe| probe.partial_cmp(&w).expect("finite wavelengths"))
                .map_err(|_| SimError::InvalidPhantom(format!("unmatched wavelength {w}")))?;
            let slot = &mut values[(iw * ny + iy) * nx + ix];
            if !slot.is_nan() {
                return Err(SimError::InvalidPhantom(format!(
                    "duplicate entry for pixel ({ix}, {iy}) at {w} nm"
                )));
            }
            *slot = t;
        }
        if let Some(hole) = values.iter().position(|v| v.is_nan()) {
            let iw = hole / (nx * ny);
            let iy = (hole / nx) % ny;
            let ix = hole % nx;
            return Err(SimError::PhantomMissing {
                ix,
                iy,
                wavelength_nm: wavelengths[iw],
            });
        }
        Phantom::new(nx, ny, wavelengths, values)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn wavelengths_nm(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    /// Transmission at a pixel for a probe wavelength. The wavelength must
    /// match a phantom plane to within 1e-6 relative.
    pub fn transmission(&self, ix: usize, iy: usize, wavelength_nm: f64) -> Result<f64, SimError> {
        if ix >= self.nx || iy >= self.ny {
            return Err(SimError::PhantomMissing {
                ix,
                iy,
                wavelength_nm,
            });
        }
        let iw = self
            .wavelengths_nm
            .iter()
            .position(|&w| (w - wavelength_nm).abs() <= 1e-6 * w.abs().max(1.0))
            .ok_or(SimError::PhantomMissing {
                ix,
                iy,
                wavelength_nm,
            })?;
        Ok(self.values[(iw * self.ny + iy) * self.nx + ix])
    }
}

/// One acquired counting window of a scan, stamped with its start time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    /// Index into the plan's wavelength list.
    pub plane: usize,
    /// Acquisition start time from the beginning of the scan, seconds.
    pub t_s: f64,
    pub counts: WindowCounts,
}

/// A complete raw scan: every counting window of every plane, in
/// acquisition order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScan {
    pub plan: ScanPlan,
    pub points: Vec<RawPoint>,
}

/// Simulates a full raster scan of `phantom` following `plan`.
///
/// Per plane the sequence is: clear-path reference windows, the serpentine
/// pixel raster, then reference windows again — the bracketing pair is
/// what lets the assembly stage interpolate source drift. `drift_slope`
/// scales the mean flux as `max(0, 1 + slope · t)` with `t` the window
/// start time. Points are drawn in parallel; each draws from substream
/// `(seed, SCAN, plane, index_in_plane)`, so the result is independent of
/// thread scheduling.
pub fn simulate_scan(
    cfg: &SourceConfig,
    phantom: &Phantom,
    plan: &ScanPlan,
    drift_slope_per_s: f64,
    seed: u64,
) -> Result<RawScan, SimError> {
    cfg.validate()?;
    plan.validate()?;
    if !drift_slope_per_s.is_finite() {
        return Err(SimError::Config(format!(
            "drift slope = {drift_slope_per_s} must be finite"
        )));
    }
    let (nx, ny) = (plan.nx(), plan.ny());
    if phantom.nx() != nx || phantom.ny() != ny {
        return Err(SimError::Config(format!(
            "phantom grid {}x{} does not match the {}x{} scan grid",
            phantom.nx(),
            phantom.ny(),
            nx,
            ny
        )));
    }

    struct Task {
        plane: usize,
        index_in_plane: usize,
        t_s: f64,
        wavelength_nm: f64,
        transmission: f64,
        profile_value: f64,
        point: PointKind,
    }

    let pixels = serpentine_pixels(nx, ny);
    let per_plane = plan.points_per_plane();
    let mut tasks = Vec::with_capacity(plan.wavelengths_nm.len() * per_plane);
    for (plane, &wavelength_nm) in plan.wavelengths_nm.iter().enumerate() {
        let profile_value = cfg.conversion_profile.value_at(wavelength_nm)?;
        for index_in_plane in 0..per_plane {
            let first_post = plan.reference_windows + pixels.len();
            let (point, transmission) =
                if index_in_plane < plan.reference_windows || index_in_plane >= first_post {
                    (PointKind::Reference, 1.0)
                } else {
                    let (ix, iy) = pixels[index_in_plane - plan.reference_windows];
                    (
                        PointKind::Pixel { ix, iy },
                        phantom.transmission(ix, iy, wavelength_nm)?,
                    )
                };
            tasks.push(Task {
                plane,
                index_in_plane,
                t_s: (plane * per_plane + index_in_plane) as f64 * plan.dwell_s,
                wavelength_nm,
                transmission,
                profile_value,
                point,
            });
        }
    }

    let points: Vec<RawPoint> = tasks
        .par_iter()
        .map(|task| {
            let mut rng = substream(
                seed,
                &[domain::SCAN, task.plane as u64, task.index_in_plane as u64],
            );
            let drift = (1.0 + drift_slope_per_s * task.t_s).max(0.0);
            let (n_signal, n_idler) = draw_window_counts(
                cfg,
                cfg.mean_pairs_per_pulse * drift,
                task.transmission,
                task.profile_value,
                plan.dwell_s,
                &mut rng,
            );
            RawPoint {
                plane: task.plane,
                t_s: task.t_s,
                counts: WindowCounts {
                    n_signal,
                    n_idler,
                    window_duration_s: plan.dwell_s,
                    wavelength_nm: task.wavelength_nm,
                    point: task.point,
                },
            }
        })
        .collect();

    Ok(RawScan {
        plan: plan.clone(),
        points,
    })
}

// ============================================================================
// Tests
// ============================================================================

//! Hyperspectral cube assembly from raw scan windows.
//!
//! A scan visits every pixel of a raster once per probe wavelength
//! (a *plane*), bracketing each plane with clear-path reference windows.
//! Assembly turns those counting windows into a transmission cube:
//!
//! 1. optional correlation rescaling of each window's idler counts by the
//!    plane-wide mean signal (the signal arm never sees the sample, so its
//!    mean is a sample-independent flux monitor),
//! 2. normalization by the reference level, linearly interpolated in time
//!    between the pre- and post-scan reference blocks — this cancels slow
//!    source drift exactly when the drift is linear,
//! 3. placement into an `(ix, iy, wavelength)` grid with a validity mask.
//!
//! The wavelength axis of the finished cube is the *calibrated* axis: each
//! nominal plane wavelength is passed through the fitted axis map. Pixels
//! that cannot be normalized (dead reference level, no usable windows) are
//! masked rather than invented.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    CalibrationError, CalibrationModel, SpectrumPoint, SpectrumSource, TransmissionSpectrum,
};
use crate::sim::{PointKind, RawScan};

/// Idler tuning range of the instrument, nm.
pub const TUNING_RANGE_NM: (f64, f64) = (2900.0, 3600.0);

/// Ratio images mask pixels whose denominator transmission falls below
/// this floor; dividing by near-opaque pixels only amplifies noise.
pub const RATIO_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum HypercubeError {
    #[error("invalid scan plan: {0}")]
    InvalidPlan(String),
    #[error("lengths differ: {values} values vs {times} timestamps")]
    LengthMismatch { values: usize, times: usize },
    #[error("reference level must be positive, got {level} at t = {t_s} s")]
    NonPositiveReference { level: f64, t_s: f64 },
    #[error("plane {plane} has no {which}-scan reference windows")]
    MissingReferences { plane: usize, which: &'static str },
    #[error("plane {plane} reference at t = {t_s} s lies inside the pixel raster")]
    ReferenceInsideRaster { plane: usize, t_s: f64 },
    #[error("plane {plane} is missing {missing} of {expected} pixels (first: ({ix}, {iy}))")]
    IncompleteScan {
        plane: usize,
        missing: usize,
        expected: usize,
        ix: usize,
        iy: usize,
    },
    #[error("pixel ({ix}, {iy}) lies outside the {nx}x{ny} grid")]
    PixelOutOfGrid {
        ix: usize,
        iy: usize,
        nx: usize,
        ny: usize,
    },
    #[error("point references plane {plane} but the plan holds {planes} wavelengths")]
    UnknownPlane { plane: usize, planes: usize },
    #[error("no cube plane near {requested_nm} nm (nearest is {nearest_nm} nm)")]
    PlaneNotFound { requested_nm: f64, nearest_nm: f64 },
    #[error("region at ({x0}, {y0}) sized {width}x{height} exceeds the {nx}x{ny} grid")]
    RegionOutOfBounds {
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
        nx: usize,
        ny: usize,
    },
    #[error("region contains no unmasked pixels in any plane")]
    EmptyRegion,
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

// ============================================================================
// Scan plans
// ============================================================================

/// Raster and spectral schedule of a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanPlan {
    /// Scan extent along x in µm; the grid spans `floor(extent/step) + 1`
    /// positions including both ends.
    pub extent_x_um: f64,
    pub extent_y_um: f64,
    /// Stage step in µm.
    pub step_um: f64,
    /// Nominal probe wavelength of each plane, strictly increasing.
    pub wavelengths_nm: Vec<f64>,
    /// Counting-window duration per point, seconds.
    pub dwell_s: f64,
    /// Clear-path reference windows acquired before *and* after each
    /// plane's raster.
    pub reference_windows: usize,
}

impl Default for ScanPlan {
    fn default() -> ScanPlan {
        ScanPlan {
            extent_x_um: 775.0,
            extent_y_um: 775.0,
            step_um: 25.0,
            wavelengths_nm: (0..15).map(|k| 2900.0 + 50.0 * k as f64).collect(),
            dwell_s: 2.0,
            reference_windows: 5,
        }
    }
}

impl ScanPlan {
    pub fn validate(&self) -> Result<(), HypercubeError> {
        let bad = |msg: String| Err(HypercubeError::InvalidPlan(msg));
        for (name, v) in [
            ("extent_x_um", self.extent_x_um),
            ("extent_y_um", self.extent_y_um),
            ("step_um", self.step_um),
            ("dwell_s", self.dwell_s),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.step_um > self.extent_x_um || self.step_um > self.extent_y_um {
            return bad(format!(
                "step {} um exceeds the scan extent {}x{} um",
                self.step_um, self.extent_x_um, self.extent_y_um
            ));
        }
        if self.wavelengths_nm.is_empty() {
            return bad("no wavelengths".into());
        }
        let (lo, hi) = TUNING_RANGE_NM;
        for (i, &w) in self.wavelengths_nm.iter().enumerate() {
            if !w.is_finite() || w < lo || w > hi {
                return bad(format!(
                    "wavelength {w} nm is outside the tuning range [{lo}, {hi}] nm"
                ));
            }
            if i > 0 && w <= self.wavelengths_nm[i - 1] {
                return bad(format!(
                    "wavelengths must be strictly increasing at index {i}"
                ));
            }
        }
        if self.reference_windows == 0 {
            return bad("at least one reference window per side is required".into());
        }
        Ok(())
    }

    /// Grid positions along x, including both ends of the extent.
    pub fn nx(&self) -> usize {
        (self.extent_x_um / self.step_um).floor() as usize + 1
    }

    pub fn ny(&self) -> usize {
        (self.extent_y_um / self.step_um).floor() as usize + 1
    }

    /// Counting windows acquired per plane: the raster plus both reference
    /// blocks.
    pub fn points_per_plane(&self) -> usize {
        self.nx() * self.ny() + 2 * self.reference_windows
    }

    pub fn total_duration_s(&self) -> f64 {
        self.wavelengths_nm.len() as f64 * self.points_per_plane() as f64 * self.dwell_s
    }
}

/// Boustrophedon pixel order: even rows left to right, odd rows right to
/// left, so the stage never jumps across the field.
pub fn serpentine_pixels(nx: usize, ny: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        if iy % 2 == 0 {
            order.extend((0..nx).map(|ix| (ix, iy)));
        } else {
            order.extend((0..nx).rev().map(|ix| (ix, iy)));
        }
    }
    order
}

// ============================================================================
// Drift correction
// ============================================================================

/// A clear-path reference level with the time it was measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefLevel {
    /// Mean counts (optionally rescaled) of the reference block.
    pub level: f64,
    /// Mean acquisition time of the block, seconds.
    pub t_s: f64,
}

fn interpolate_reference(pre: RefLevel, post: RefLevel, t_s: f64) -> f64 {
    if post.t_s == pre.t_s {
        0.5 * (pre.level + post.level)
    } else {
        pre.level + (t_s - pre.t_s) * (post.level - pre.level) / (post.t_s - pre.t_s)
    }
}

/// Normalizes raw values by the reference level linearly interpolated
/// between the bracketing blocks. For a source whose flux drifts linearly
/// in time this cancels the drift exactly; the result is a transmission
/// when the references measure the clear path.
pub fn drift_correct(
    values: &[f64],
    times_s: &[f64],
    pre: RefLevel,
    post: RefLevel,
) -> Result<Vec<f64>, HypercubeError> {
    if values.len() != times_s.len() {
        return Err(HypercubeError::LengthMismatch {
            values: values.len(),
            times: times_s.len(),
        });
    }
    for level in [pre, post] {
        if !(level.level.is_finite() && level.level > 0.0) {
            return Err(HypercubeError::NonPositiveReference {
                level: level.level,
                t_s: level.t_s,
            });
        }
    }
    Ok(values
        .iter()
        .zip(times_s)
        .map(|(&v, &t)| v / interpolate_reference(pre, post, t))
        .collect())
}

// ============================================================================
// Cube assembly
// ============================================================================

/// Reference levels recorded for one plane during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneReferences {
    pub plane: usize,
    /// Nominal (pre-calibration) wavelength of the plane.
    pub wavelength_nm: f64,
    pub pre: RefLevel,
    pub post: RefLevel,
}

/// How the cube was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeProvenance {
    pub calibration: CalibrationModel,
    pub use_rescaling: bool,
    pub reference_levels: Vec<PlaneReferences>,
}

/// Assembled transmission cube. `data` is flattened as
/// `(iw * ny + iy) * nx + ix`; `mask` marks valid entries.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub nx: usize,
    pub ny: usize,
    /// Calibrated wavelength of each plane, nm.
    pub wavelengths_nm: Vec<f64>,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub plan: ScanPlan,
    pub provenance: CubeProvenance,
}

impl HyperCube {
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iw: usize) -> usize {
        (iw * self.ny + iy) * self.nx + ix
    }

    /// Transmission at a voxel, or `None` where masked.
    pub fn value(&self, ix: usize, iy: usize, iw: usize) -> Option<f64> {
        let idx = self.index(ix, iy, iw);
        self.mask[idx].then(|| self.data[idx])
    }

    pub fn plane_values(&self, iw: usize) -> &[f64] {
        &self.data[iw * self.nx * self.ny..(iw + 1) * self.nx * self.ny]
    }

    pub fn plane_mask(&self, iw: usize) -> &[bool] {
        &self.mask[iw * self.nx * self.ny..(iw + 1) * self.nx * self.ny]
    }
}

/// Assembles a raw scan into a transmission cube.
///
/// With `use_rescaling`, each window's idler counts are rescaled by the
/// plane-wide mean signal over its own signal counts before normalization;
/// windows with zero signal counts are dropped, and a pixel with no
/// surviving windows is masked. A plane whose reference level is not
/// positive is masked whole; other planes are unaffected. The result is
/// independent of the order of `raw.points` — windows are re-sorted by
/// acquisition time internally.
pub fn assemble_cube(
    raw: &RawScan,
    calibration: &CalibrationModel,
    use_rescaling: bool,
) -> Result<HyperCube, HypercubeError> {
    raw.plan.validate()?;
    calibration.validate()?;
    let plan = &raw.plan;
    let (nx, ny) = (plan.nx(), plan.ny());
    let n_planes = plan.wavelengths_nm.len();

    let mut by_plane: Vec<Vec<&crate::sim::RawPoint>> = vec![Vec::new(); n_planes];
    for p in &raw.points {
        let slot = by_plane
            .get_mut(p.plane)
            .ok_or(HypercubeError::UnknownPlane {
                plane: p.plane,
                planes: n_planes,
            })?;
        slot.push(p);
    }

    let mut data = vec![0.0; nx * ny * n_planes];
    let mut mask = vec![false; nx * ny * n_planes];
    let mut reference_levels = Vec::with_capacity(n_planes);

    for (plane, mut points) in by_plane.into_iter().enumerate() {
        points.sort_by(|a, b| a.t_s.partial_cmp(&b.t_s).expect("finite times"));

        // Window value: raw idler counts, or idler rescaled by the
        // plane-wide mean signal. `None` marks an excluded window.
        let mean_signal = {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.counts.n_signal > 0)
                .map(|p| p.counts.n_signal as f64)
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let window_value = |p: &crate::sim::RawPoint| -> Option<f64> {
            if !use_rescaling {
                return Some(p.counts.n_idler as f64);
            }
            if p.counts.n_signal == 0 {
                return None;
            }
            Some(p.counts.n_idler as f64 * mean_signal / p.counts.n_signal as f64)
        };

        let pixel_times: Vec<f64> = points
            .iter()
            .filter(|p| matches!(p.counts.point, PointKind::Pixel { .. }))
            .map(|p| p.t_s)
            .collect();
        if pixel_times.is_empty() {
            return Err(HypercubeError::IncompleteScan {
                plane,
                missing: nx * ny,
                expected: nx * ny,
                ix: 0,
                iy: 0,
            });
        }
        let (first_pixel_t, last_pixel_t) = (pixel_times[0], pixel_times[pixel_times.len() - 1]);

        let mut pre: Vec<(f64, f64)> = Vec::new(); // (value, t)
        let mut post: Vec<(f64, f64)> = Vec::new();
        let mut per_pixel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nx * ny];
        let mut excluded_pixels: Vec<bool> = vec![false; nx * ny];

        for p in &points {
            match p.counts.point {
                PointKind::Reference => {
                    let side = if p.t_s < first_pixel_t {
                        &mut pre
                    } else if p.t_s > last_pixel_t {
                        &mut post
                    } else {
                        return Err(HypercubeError::ReferenceInsideRaster { plane, t_s: p.t_s });
                    };
                    if let Some(v) = window_value(p) {
                        side.push((v, p.t_s));
                    }
                }
                PointKind::Pixel { ix, iy } => {
                    if ix >= nx || iy >= ny {
                        return Err(HypercubeError::PixelOutOfGrid { ix, iy, nx, ny });
                    }
                    match window_value(p) {
                        Some(v) => per_pixel[iy * nx + ix].push((v, p.t_s)),
                        None => excluded_pixels[iy * nx + ix] = true,
                    }
                }
            }
        }

        // A pixel is *missing* when the scan never visited it; a visited
        // pixel whose windows were all excluded is masked, not an error.
        let missing: Vec<usize> = per_pixel
            .iter()
            .enumerate()
            .filter(|(i, w)| w.is_empty() && !excluded_pixels[*i])
            .map(|(i, _)| i)
            .collect();
        if let Some(&first) = missing.first() {
            return Err(HypercubeError::IncompleteScan {
                plane,
                missing: missing.len(),
                expected: nx * ny,
                ix: first % nx,
                iy: first / nx,
            });
        }

        let block_level = |block: &[(f64, f64)]| -> Option<RefLevel> {
            (!block.is_empty()).then(|| RefLevel {
                level: block.iter().map(|(v, _)| v).sum::<f64>() / block.len() as f64,
                t_s: block.iter().map(|(_, t)| t).sum::<f64>() / block.len() as f64,
            })
        };
        let pre_level = block_level(&pre).ok_or(HypercubeError::MissingReferences {
            plane,
            which: "pre",
        })?;
        let post_level = block_level(&post).ok_or(HypercubeError::MissingReferences {
            plane,
            which: "post",
        })?;
        reference_levels.push(PlaneReferences {
            plane,
            wavelength_nm: plan.wavelengths_nm[plane],
            pre: pre_level,
            post: post_level,
        });

        let plane_usable = pre_level.level.is_finite()
            && post_level.level.is_finite()
            && pre_level.level > 0.0
            && post_level.level > 0.0;
        if !plane_usable {
            continue; // whole plane stays masked
        }

        for (pix, windows) in per_pixel.iter().enumerate() {
            if windows.is_empty() {
                continue; // all windows excluded: pixel stays masked
            }
            let mean = windows
                .iter()
                .map(|&(v, t)| v / interpolate_reference(pre_level, post_level, t))
                .sum::<f64>()
                / windows.len() as f64;
            let idx = plane * nx * ny + pix;
            data[idx] = mean;
            mask[idx] = true;
        }
    }

    Ok(HyperCube {
        nx,
        ny,
        wavelengths_nm: plan
            .wavelengths_nm
            .iter()
            .map(|&w| calibration.map_wavelength(w))
            .collect(),
        data,
        mask,
        plan: plan.clone(),
        provenance: CubeProvenance {
            calibration: *calibration,
            use_rescaling,
            reference_levels,
        },
    })
}

// ============================================================================
// Contrast images and spectra
// ============================================================================

/// How two planes are combined into a contrast image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// `T(λ_a) − T(λ_b)` per pixel.
    Difference,
    /// `T(λ_a) / T(λ_b)` per pixel; near-opaque denominators are masked.
    Ratio,
}

/// Two-wavelength contrast image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastImage {
    pub nx: usize,
    pub ny: usize,
    /// Calibrated wavelengths of the planes actually used.
    pub wavelength_a_nm: f64,
    pub wavelength_b_nm: f64,
    pub mode: ContrastMode,
    /// Row-major `iy * nx + ix`; masked entries hold 0.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Index of the plane nearest to `wavelength_nm`, provided the request is
/// within half an adjacent plane gap; ties pick the shorter wavelength.
fn nearest_plane(cube: &HyperCube, wavelength_nm: f64) -> Result<usize, HypercubeError> {
    let axis = &cube.wavelengths_nm;
    let mut best = 0;
    for (i, &w) in axis.iter().enumerate() {
        if (w - wavelength_nm).abs() < (axis[best] - wavelength_nm).abs() {
            best = i;
        }
    }
    let gap = match (
        best.checked_sub(1).map(|i| axis[best] - axis[i]),
        axis.get(best + 1).map(|w| w - axis[best]),
    ) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 0.0,
    };
    let tolerance = 0.5 * gap + 1e-6 * wavelength_nm.abs().max(1.0);
    if (axis[best] - wavelength_nm).abs() > tolerance {
        return Err(HypercubeError::PlaneNotFound {
            requested_nm: wavelength_nm,
            nearest_nm: axis[best],
        });
    }
    Ok(best)
}

/// Builds a two-wavelength contrast image from the planes nearest the
/// requested wavelengths. Masked pixels in either plane are masked in the
/// result.
pub fn contrast_image(
    cube: &HyperCube,
    wavelength_a_nm: f64,
    wavelength_b_nm: f64,
    mode: ContrastMode,
) -> Result<ContrastImage, HypercubeError> {
    let ia = nearest_plane(cube, wavelength_a_nm)?;
    let ib = nearest_plane(cube, wavelength_b_nm)?;
    let n = cube.nx * cube.ny;
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    for pix in 0..n {
        let (a, b) = (
            (cube.plane_mask(ia)[pix]).then(|| cube.plane_values(ia)[pix]),
            (cube.plane_mask(ib)[pix]).then(|| cube.plane_values(ib)[pix]),
        );
        let (Some(a), Some(b)) = (a, b) else { continue };
        match mode {
            ContrastMode::Difference => {
                values[pix] = a - b;
                mask[pix] = true;
            }
            ContrastMode::Ratio => {
                if b >= RATIO_FLOOR {
                    values[pix] = a / b;
                    mask[pix] = true;
                }
            }
        }
    }
    Ok(ContrastImage {
        nx: cube.nx,
        ny: cube.ny,
        wavelength_a_nm: cube.wavelengths_nm[ia],
        wavelength_b_nm: cube.wavelengths_nm[ib],
        mode,
        values,
        mask,
    })
}

/// Rectangular pixel region, inclusive of its origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRegion {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Mean transmission spectrum of a pixel region. Per plane, the value is
/// the mean over unmasked pixels and the uncertainty is the standard error
/// of that mean (0 for a single pixel); planes with no unmasked pixel in
/// the region are omitted.
pub fn extract_spectrum(
    cube: &HyperCube,
    region: PixelRegion,
) -> Result<TransmissionSpectrum, HypercubeError> {
    if region.width == 0
        || region.height == 0
        || region.x0 + region.width > cube.nx
        || region.y0 + region.height > cube.ny
    {
        return Err(HypercubeError::RegionOutOfBounds {
            x0: region.x0,
            y0: region.y0,
            width: region.width,
            height: region.height,
            nx: cube.nx,
            ny: cube.ny,
        });
    }
    let mut points = Vec::with_capacity(cube.wavelengths_nm.len());
    for (iw, &wavelength_nm) in cube.wavelengths_nm.iter().enumerate() {
        let mut vals = Vec::with_capacity(region.width * region.height);
        for iy in region.y0..region.y0 + region.height {
            for ix in region.x0..region.x0 + region.width {
                if let Some(v) = cube.value(ix, iy, iw) {
                    vals.push(v);
                }
            }
        }
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let uncertainty = if vals.len() < 2 {
            0.0
        } else {
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        points.push(SpectrumPoint {
            wavelength_nm,
            transmission: mean,
            uncertainty,
        });
    }
    if points.is_empty() {
        return Err(HypercubeError::EmptyRegion);
    }
    Ok(TransmissionSpectrum::new(
        points,
        SpectrumSource::SinglePhoton,
    )?)
}

// ============================================================================
// Tests
// ============================================================================

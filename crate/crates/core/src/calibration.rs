//! Spectral calibration against a reference absorption spectrum.
//!
//! Wavelengths in this instrument are related by energy conservation in
//! the nonlinear stages: pair generation obeys
//! `1/λ_pump = 1/λ_signal + 1/λ_idler`, and upconversion maps a wavelength
//! λ to `λ·λ_pump / (λ + λ_pump)`. The signal-arm spectrometer therefore
//! determines the idler probe wavelength arithmetically.
//!
//! Residual axis errors and sample-thickness differences against a
//! reference spectrometer are absorbed by a three-parameter model fitted to
//! a measured transmission spectrum of a known material:
//!
//! ```text
//! T_model(λ)  = 1 − A_C(λ)
//! A_C(λ)      = 1 − (1 − A_SP(aλ + b))^R       (affine axis map λ' = aλ + b)
//! A_SP(λ')    = 1 − e^(−α(λ')·x)               (Beer–Lambert absorptance)
//! ```
//!
//! where `α(λ)·x` comes from the reference transmission curve and `R` is
//! the effective thickness ratio between the two measurements. The fit is
//! a damped Gauss–Newton (Levenberg) minimization of the transmission
//! residuals, with derivatives by central differences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to reference transmissions before taking logs, so opaque
/// points map to a large finite optical depth instead of infinity.
pub const TRANSMISSION_FLOOR: f64 = 1e-6;
/// Minimum number of measured points inside the reference curve's domain.
pub const MIN_OVERLAP: usize = 10;

const MAX_ITERATIONS: usize = 200;
const RELATIVE_COST_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("spectrum has no points")]
    EmptySpectrum,
    #[error("wavelengths must be strictly increasing (violated at index {0})")]
    NonIncreasingWavelengths(usize),
    #[error("non-finite or negative value {value} at {wavelength_nm} nm")]
    InvalidValue { wavelength_nm: f64, value: f64 },
    #[error("wavelength must be positive, got {0} nm")]
    NonPositiveWavelength(f64),
    #[error("{input_nm} nm does not lie below the pump energy ({pump_nm} nm); no conjugate wavelength exists")]
    NotLongerThanPump { input_nm: f64, pump_nm: f64 },
    #[error("{wavelength_nm} nm is outside the curve domain [{lo}, {hi}] nm")]
    OutsideDomain {
        wavelength_nm: f64,
        lo: f64,
        hi: f64,
    },
    #[error("only {got} measured points overlap the reference curve; need {need}")]
    InsufficientOverlap { got: usize, need: usize },
    #[error("fit did not converge: cost {cost:.6e} after {iterations} iterations")]
    NotConverged { cost: f64, iterations: usize },
    #[error("invalid calibration model: {0}")]
    InvalidModel(String),
}

/// Where a transmission spectrum came from; affects nothing numerically but
/// is carried through file formats for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    SinglePhoton,
    Ftir,
}

/// One point of a transmission spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumPoint {
    pub wavelength_nm: f64,
    /// Transmitted fraction; values slightly above 1 from noise are kept.
    pub transmission: f64,
    /// One-sigma uncertainty of `transmission` (0 when unknown).
    pub uncertainty: f64,
}

/// Transmission versus wavelength, strictly ascending in wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSpectrum {
    points: Vec<SpectrumPoint>,
    source: SpectrumSource,
}

impl TransmissionSpectrum {
    pub fn new(
        points: Vec<SpectrumPoint>,
        source: SpectrumSource,
    ) -> Result<TransmissionSpectrum, CalibrationError> {
        if points.is_empty() {
            return Err(CalibrationError::EmptySpectrum);
        }
        for (i, p) in points.iter().enumerate() {
            if !p.transmission.is_finite() || p.transmission < 0.0 {
                return Err(CalibrationError::InvalidValue {
                    wavelength_nm: p.wavelength_nm,
                    value: p.transmission,
                });
            }
            if !p.wavelength_nm.is_finite() || p.wavelength_nm <= 0.0 {
                return Err(CalibrationError::NonPositiveWavelength(p.wavelength_nm));
            }
            if i > 0 && p.wavelength_nm <= points[i - 1].wavelength_nm {
                return Err(CalibrationError::NonIncreasingWavelengths(i));
            }
        }
        Ok(TransmissionSpectrum { points, source })
    }

    pub fn points(&self) -> &[SpectrumPoint] {
        &self.points
    }

    pub fn source(&self) -> SpectrumSource {
        self.source
    }
}

/// Transmitted fraction from a sample/reference count pair. A reference of
/// zero carries no information: the point is masked (`None`) rather than
/// propagated as a NaN. Noise can push results slightly above 1; they are
/// preserved.
pub fn transmission(sample: f64, reference: f64) -> Option<f64> {
    if reference <= 0.0 {
        None
    } else {
        Some(sample / reference)
    }
}

/// Idler wavelength conjugate to `signal_nm` under pump energy
/// conservation: `1/λ_idler = 1/λ_pump − 1/λ_signal`.
pub fn idler_wavelength(signal_nm: f64, pump_nm: f64) -> Result<f64, CalibrationError> {
    conjugate_wavelength(signal_nm, pump_nm)
}

/// Signal wavelength conjugate to `idler_nm`; inverse of
/// [`idler_wavelength`] by symmetry of the energy relation.
pub fn signal_wavelength(idler_nm: f64, pump_nm: f64) -> Result<f64, CalibrationError> {
    conjugate_wavelength(idler_nm, pump_nm)
}

fn conjugate_wavelength(input_nm: f64, pump_nm: f64) -> Result<f64, CalibrationError> {
    if !pump_nm.is_finite() || pump_nm <= 0.0 {
        return Err(CalibrationError::NonPositiveWavelength(pump_nm));
    }
    if !input_nm.is_finite() || input_nm <= pump_nm {
        return Err(CalibrationError::NotLongerThanPump { input_nm, pump_nm });
    }
    Ok(pump_nm * input_nm / (input_nm - pump_nm))
}

/// Sum-frequency wavelength of `input_nm` mixed with the pump:
/// `λ_up = λ·λ_pump / (λ + λ_pump)`.
pub fn upconverted_wavelength(input_nm: f64, pump_nm: f64) -> Result<f64, CalibrationError> {
    if !input_nm.is_finite() || input_nm <= 0.0 {
        return Err(CalibrationError::NonPositiveWavelength(input_nm));
    }
    if !pump_nm.is_finite() || pump_nm <= 0.0 {
        return Err(CalibrationError::NonPositiveWavelength(pump_nm));
    }
    Ok(input_nm * pump_nm / (input_nm + pump_nm))
}

/// Optical depth `α(λ)·x` versus wavelength, linearly interpolated between
/// control points.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionCurve {
    /// Strictly ascending `(wavelength_nm, optical_depth)` pairs.
    points: Vec<(f64, f64)>,
}

impl AbsorptionCurve {
    pub fn from_points(points: Vec<(f64, f64)>) -> Result<AbsorptionCurve, CalibrationError> {
        if points.is_empty() {
            return Err(CalibrationError::EmptySpectrum);
        }
        for (i, &(w, od)) in points.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(CalibrationError::NonPositiveWavelength(w));
            }
            if !od.is_finite() || od < 0.0 {
                return Err(CalibrationError::InvalidValue {
                    wavelength_nm: w,
                    value: od,
                });
            }
            if i > 0 && w <= points[i - 1].0 {
                return Err(CalibrationError::NonIncreasingWavelengths(i));
            }
        }
        Ok(AbsorptionCurve { points })
    }

    /// Converts a reference transmission spectrum to optical depth,
    /// `α·x = −ln(T)` with `T` clamped to `[TRANSMISSION_FLOOR, 1]`.
    pub fn from_transmission_spectrum(spectrum: &TransmissionSpectrum) -> AbsorptionCurve {
        AbsorptionCurve {
            points: spectrum
                .points()
                .iter()
                .map(|p| {
                    let t = p.transmission.clamp(TRANSMISSION_FLOOR, 1.0);
                    (p.wavelength_nm, -t.ln())
                })
                .collect(),
        }
    }

    /// Inclusive wavelength domain covered by the control points.
    pub fn domain(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear interpolation; extrapolation is an error.
    pub fn optical_depth(&self, wavelength_nm: f64) -> Result<f64, CalibrationError> {
        let (lo, hi) = self.domain();
        if !(wavelength_nm >= lo && wavelength_nm <= hi) {
            return Err(CalibrationError::OutsideDomain {
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
        let (w0, d0) = self.points[idx - 1];
        let (w1, d1) = self.points[idx];
        if wavelength_nm == w0 {
            return Ok(d0);
        }
        let t = (wavelength_nm - w0) / (w1 - w0);
        Ok(d0 + t * (d1 - d0))
    }
}

/// Affine wavelength map `λ' = a·λ + b_nm` plus effective thickness ratio
/// `r` relating the single-photon measurement to the reference spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub a: f64,
    pub b_nm: f64,
    pub r: f64,
}

impl CalibrationModel {
    /// The identity calibration: untouched axis, equal thickness.
    pub fn identity() -> CalibrationModel {
        CalibrationModel {
            a: 1.0,
            b_nm: 0.0,
            r: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(CalibrationError::InvalidModel(format!(
                "axis scale a = {} must be positive",
                self.a
            )));
        }
        if !self.b_nm.is_finite() {
            return Err(CalibrationError::InvalidModel(format!(
                "axis offset b = {} must be finite",
                self.b_nm
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(CalibrationError::InvalidModel(format!(
                "thickness ratio r = {} must be positive",
                self.r
            )));
        }
        Ok(())
    }

    /// Maps a nominal wavelength onto the calibrated axis.
    #[inline]
    pub fn map_wavelength(&self, wavelength_nm: f64) -> f64 {
        self.a * wavelength_nm + self.b_nm
    }
}

/// Modeled absorptance `A_C(λ) = 1 − (1 − A_SP(aλ+b))^r` for a sample
/// described by `curve`, evaluated at nominal wavelength `λ`.
pub fn absorptance_model(
    wavelength_nm: f64,
    model: &CalibrationModel,
    curve: &AbsorptionCurve,
) -> Result<f64, CalibrationError> {
    Ok(1.0 - model_transmission(wavelength_nm, model, curve)?)
}

/// Modeled transmission `(1 − A_SP(aλ+b))^r = e^(−r·α·x)`.
pub fn model_transmission(
    wavelength_nm: f64,
    model: &CalibrationModel,
    curve: &AbsorptionCurve,
) -> Result<f64, CalibrationError> {
    let od = curve.optical_depth(model.map_wavelength(wavelength_nm))?;
    Ok((-model.r * od).exp())
}

/// Result of [`fit_calibration`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub model: CalibrationModel,
    /// Root-mean-square transmission residual at the optimum.
    pub residual_rms: f64,
    pub iterations: usize,
}

/// Fits `(a, b, r)` so the modeled transmission matches the measured
/// spectrum, starting from the identity model. Measured points outside the
/// reference curve's domain are ignored; at least [`MIN_OVERLAP`] must
/// remain. Trial steps that map a point outside the domain, or that drive
/// `a` or `r` non-positive, are rejected by the damping schedule.
pub fn fit_calibration(
    measured: &TransmissionSpectrum,
    reference: &TransmissionSpectrum,
) -> Result<FitReport, CalibrationError> {
    let curve = AbsorptionCurve::from_transmission_spectrum(reference);
    let (lo, hi) = curve.domain();
    let pts: Vec<(f64, f64)> = measured
        .points()
        .iter()
        .filter(|p| p.wavelength_nm >= lo && p.wavelength_nm <= hi)
        .map(|p| (p.wavelength_nm, p.transmission))
        .collect();
    if pts.len() < MIN_OVERLAP {
        return Err(CalibrationError::InsufficientOverlap {
            got: pts.len(),
            need: MIN_OVERLAP,
        });
    }

    let residuals = |p: &[f64; 3]| -> Option<Vec<f64>> {
        if p[0] <= 0.0 || p[2] <= 0.0 {
            return None;
        }
        let model = CalibrationModel {
            a: p[0],
            b_nm: p[1],
            r: p[2],
        };
        pts.iter()
            .map(|&(w, t)| model_transmission(w, &model, &curve).ok().map(|m| m - t))
            .collect()
    };
    let cost_of = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let mut p = [1.0, 0.0, 1.0];
    let mut res = residuals(&p).expect("identity map keeps overlap points in domain");
    let mut cost = cost_of(&res);
    let mut damping = 1e-3;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cost == 0.0 {
            break;
        }

        // Central-difference Jacobian, relative step 1e-6.
        let mut cols: [Vec<f64>; 3] = Default::default();
        for j in 0..3 {
            let h = 1e-6 * p[j].abs().max(1.0);
            let mut plus = p;
            plus[j] += h;
            let mut minus = p;
            minus[j] -= h;
            let (rp, rm) = match (residuals(&plus), residuals(&minus)) {
                (Some(rp), Some(rm)) => (rp, rm),
                _ => return Err(CalibrationError::NotConverged { cost, iterations }),
            };
            cols[j] = rp
                .iter()
                .zip(&rm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
        }
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for j in 0..3 {
            for k in 0..3 {
                jtj[j][k] = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            }
            jtr[j] = cols[j].iter().zip(&res).map(|(a, b)| a * b).sum();
        }

        // Damped trials: grow the damping until a step reduces the cost.
        let mut improved = false;
        while damping <= 1e12 {
            let mut lhs = jtj;
            for j in 0..3 {
                lhs[j][j] += damping * jtj[j][j].max(1e-12);
            }
            let rhs = [-jtr[0], -jtr[1], -jtr[2]];
            let Some(step) = solve3(lhs, rhs) else {
                damping *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            if let Some(trial_res) = residuals(&trial) {
                let trial_cost = cost_of(&trial_res);
                if trial_cost < cost {
                    let drop = (cost - trial_cost) / cost;
                    p = trial;
                    res = trial_res;
                    cost = trial_cost;
                    damping = (damping / 10.0).max(1e-15);
                    improved = true;
                    if drop < RELATIVE_COST_TOLERANCE {
                        iterations = MAX_ITERATIONS; // converged; exit outer loop
                    }
                    break;
                }
            }
            damping *= 10.0;
        }
        if !improved {
            // Damping exhausted without any acceptable step: either we are
            // at a minimum (done) or the problem is degenerate.
            if cost_of(&res) / pts.len() as f64 > 1.0 {
                return Err(CalibrationError::NotConverged { cost, iterations });
            }
            break;
        }
    }

    let model = CalibrationModel {
        a: p[0],
        b_nm: p[1],
        r: p[2],
    };
    model.validate()?;
    Ok(FitReport {
        model,
        residual_rms: (cost / pts.len() as f64).sqrt(),
        iterations: iterations.min(MAX_ITERATIONS),
    })
}

/// Rewrites the wavelength axis of a spectrum through the calibration map;
/// transmission values are untouched.
pub fn apply_calibration(
    model: &CalibrationModel,
    spectrum: &TransmissionSpectrum,
) -> Result<TransmissionSpectrum, CalibrationError> {
    model.validate()?;
    TransmissionSpectrum::new(
        spectrum
            .points()
            .iter()
            .map(|p| SpectrumPoint {
                wavelength_nm: model.map_wavelength(p.wavelength_nm),
                ..*p
            })
            .collect(),
        spectrum.source(),
    )
}

/// Maps a bare wavelength axis through the calibration.
pub fn apply_to_axis(model: &CalibrationModel, wavelengths_nm: &[f64]) -> Vec<f64> {
    wavelengths_nm
        .iter()
        .map(|&w| model.map_wavelength(w))
        .collect()
}

/// 3×3 linear solve by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| {
            m[a][col]
                .abs()
                .partial_cmp(&m[b][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        let pivot_row = m[col];
        for row in col + 1..3 {
            let f = m[row][col] / pivot_row[col];
            for (cell, p) in m[row].iter_mut().zip(pivot_row.iter()).skip(col) {
                *cell -= f * p;
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = v[row];
        for k in row + 1..3 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    x.iter().all(|xi| xi.is_finite()).then_some(x)
}

// ============================================================================
// Tests
// ============================================================================

//! On-disk formats for every pipeline stage.
//!
//! Tabular data is CSV with a header row; the calibration model is a small
//! TOML file; an assembled cube is a directory holding a JSON manifest,
//! one CSV per wavelength plane (masked pixels are omitted, not written as
//! placeholders), and the per-plane reference levels. Floating-point
//! values are written in shortest round-trip form, so a write/read cycle
//! reproduces values bit for bit and byte-identical inputs give
//! byte-identical outputs.
//!
//! Every error names the file it came from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationModel, SpectrumPoint, SpectrumSource, TransmissionSpectrum};
use crate::correlation::NoiseStats;
use crate::gating::ArrivalHistogram;
use crate::hypercube::{
    ContrastImage, CubeProvenance, HyperCube, PlaneReferences, RefLevel, ScanPlan,
};
use crate::sim::{Phantom, PointKind, RawPoint, RawScan, WindowCounts};
use crate::timetag::{decode_stream, StreamError, StreamHeader, TimeTagRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Stream { path: PathBuf, source: StreamError },
}

impl IoError {
    fn format(path: &Path, msg: impl ToString) -> IoError {
        IoError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| IoError::format(path, e))?;
    }
    let bytes = writer.into_inner().map_err(|e| IoError::format(path, e))?;
    write_file(path, bytes)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let bytes = read_file(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| IoError::format(path, e))
}

// ============================================================================
// Time-tag streams
// ============================================================================

/// Writes pre-encoded stream bytes (see [`crate::timetag`]).
pub fn write_stream(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_file(path, bytes)
}

pub fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<TimeTagRecord>), IoError> {
    let bytes = read_file(path)?;
    decode_stream(&bytes).map_err(|source| IoError::Stream {
        path: path.to_path_buf(),
        source,
    })
}

// ============================================================================
// Phantoms
// ============================================================================

#[derive(Serialize, Deserialize)]
struct PhantomRow {
    ix: usize,
    iy: usize,
    wavelength_nm: f64,
    transmission: f64,
}

pub fn write_phantom(path: &Path, phantom: &Phantom) -> Result<(), IoError> {
    let mut rows = Vec::new();
    for &wavelength_nm in phantom.wavelengths_nm() {
        for iy in 0..phantom.ny() {
            for ix in 0..phantom.nx() {
                rows.push(PhantomRow {
                    ix,
                    iy,
                    wavelength_nm,
                    transmission: phantom
                        .transmission(ix, iy, wavelength_nm)
                        .expect("phantom is dense"),
                });
            }
        }
    }
    write_csv(path, rows)
}

pub fn read_phantom(path: &Path) -> Result<Phantom, IoError> {
    let rows: Vec<PhantomRow> = read_csv(path)?;
    Phantom::from_points(
        rows.into_iter()
            .map(|r| (r.ix, r.iy, r.wavelength_nm, r.transmission)),
    )
    .map_err(|e| IoError::format(path, e))
}

// ============================================================================
// Raw scans
// ============================================================================

#[derive(Serialize, Deserialize)]
struct RawScanRow {
    plane: usize,
    wavelength_nm: f64,
    kind: String,
    ix: Option<usize>,
    iy: Option<usize>,
    t_s: f64,
    duration_s: f64,
    n_signal: u64,
    n_idler: u64,
}

pub fn write_raw_scan(path: &Path, scan: &RawScan) -> Result<(), IoError> {
    write_csv(
        path,
        scan.points.iter().map(|p| {
            let (kind, ix, iy) = match p.counts.point {
                PointKind::Pixel { ix, iy } => ("pixel", Some(ix), Some(iy)),
                PointKind::Reference => ("reference", None, None),
            };
            RawScanRow {
                plane: p.plane,
                wavelength_nm: p.counts.wavelength_nm,
                kind: kind.to_string(),
                ix,
                iy,
                t_s: p.t_s,
                duration_s: p.counts.window_duration_s,
                n_signal: p.counts.n_signal,
                n_idler: p.counts.n_idler,
            }
        }),
    )
}

/// Reads scan points back; the plan is not stored in the CSV and must be
/// supplied (it normally comes from the run configuration).
pub fn read_raw_scan(path: &Path, plan: &ScanPlan) -> Result<RawScan, IoError> {
    let rows: Vec<RawScanRow> = read_csv(path)?;
    let mut points = Vec::with_capacity(rows.len());
    for row in rows {
        let point = match row.kind.as_str() {
            "reference" => PointKind::Reference,
            "pixel" => {
                let (Some(ix), Some(iy)) = (row.ix, row.iy) else {
                    return Err(IoError::format(
                        path,
                        format!("pixel row at t = {} s lacks ix/iy", row.t_s),
                    ));
                };
                PointKind::Pixel { ix, iy }
            }
            other => {
                return Err(IoError::format(
                    path,
                    format!("unknown point kind {other:?}"),
                ))
            }
        };
        points.push(RawPoint {
            plane: row.plane,
            t_s: row.t_s,
            counts: WindowCounts {
                n_signal: row.n_signal,
                n_idler: row.n_idler,
                window_duration_s: row.duration_s,
                wavelength_nm: row.wavelength_nm,
                point,
            },
        });
    }
    Ok(RawScan {
        plan: plan.clone(),
        points,
    })
}

// ============================================================================
// Counting windows, histograms, noise statistics
// ============================================================================

#[derive(Serialize, Deserialize)]
struct WindowRow {
    window: usize,
    wavelength_nm: f64,
    duration_s: f64,
    n_signal: u64,
    n_idler: u64,
}

pub fn write_windows(path: &Path, windows: &[WindowCounts]) -> Result<(), IoError> {
    write_csv(
        path,
        windows.iter().enumerate().map(|(window, w)| WindowRow {
            window,
            wavelength_nm: w.wavelength_nm,
            duration_s: w.window_duration_s,
            n_signal: w.n_signal,
            n_idler: w.n_idler,
        }),
    )
}

pub fn read_windows(path: &Path) -> Result<Vec<WindowCounts>, IoError> {
    let rows: Vec<WindowRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| WindowCounts {
            n_signal: r.n_signal,
            n_idler: r.n_idler,
            window_duration_s: r.duration_s,
            wavelength_nm: r.wavelength_nm,
            point: PointKind::Reference,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct HistogramRow {
    bin_start_ps: u64,
    count: u64,
}

pub fn write_histogram(path: &Path, histogram: &ArrivalHistogram) -> Result<(), IoError> {
    write_csv(
        path,
        histogram
            .bins
            .iter()
            .enumerate()
            .map(|(i, &count)| HistogramRow {
                bin_start_ps: histogram.start_ps + i as u64 * histogram.bin_width_ps,
                count,
            }),
    )
}

#[derive(Serialize, Deserialize)]
struct StatsRow {
    wavelength_nm: f64,
    mean_idler: f64,
    std_raw: f64,
    std_rescaled: f64,
    shot_noise: f64,
}

pub fn write_noise_stats(path: &Path, stats: &[NoiseStats]) -> Result<(), IoError> {
    write_csv(
        path,
        stats.iter().map(|s| StatsRow {
            wavelength_nm: s.wavelength_nm,
            mean_idler: s.mean_idler,
            std_raw: s.std_raw,
            std_rescaled: s.std_rescaled,
            shot_noise: s.shot_noise_level,
        }),
    )
}

// ============================================================================
// Spectra
// ============================================================================

/// One point of a measured calibration spectrum: gated counts through the
/// sample and through the clear path at the same probe wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredRecord {
    pub wavelength_nm: f64,
    pub counts_sample: f64,
    pub counts_ref: f64,
}

pub fn write_measured_spectrum(path: &Path, records: &[MeasuredRecord]) -> Result<(), IoError> {
    write_csv(path, records.iter().copied())
}

pub fn read_measured_spectrum(path: &Path) -> Result<Vec<MeasuredRecord>, IoError> {
    read_csv(path)
}

#[derive(Serialize, Deserialize)]
struct FtirRow {
    wavelength_nm: f64,
    transmission: f64,
}

pub fn write_ftir_spectrum(path: &Path, spectrum: &TransmissionSpectrum) -> Result<(), IoError> {
    write_csv(
        path,
        spectrum.points().iter().map(|p| FtirRow {
            wavelength_nm: p.wavelength_nm,
            transmission: p.transmission,
        }),
    )
}

pub fn read_ftir_spectrum(path: &Path) -> Result<TransmissionSpectrum, IoError> {
    let rows: Vec<FtirRow> = read_csv(path)?;
    TransmissionSpectrum::new(
        rows.into_iter()
            .map(|r| SpectrumPoint {
                wavelength_nm: r.wavelength_nm,
                transmission: r.transmission,
                uncertainty: 0.0,
            })
            .collect(),
        SpectrumSource::Ftir,
    )
    .map_err(|e| IoError::format(path, e))
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    wavelength_nm: f64,
    transmission: f64,
    uncertainty: f64,
}

pub fn write_spectrum(path: &Path, spectrum: &TransmissionSpectrum) -> Result<(), IoError> {
    write_csv(
        path,
        spectrum.points().iter().map(|p| SpectrumRow {
            wavelength_nm: p.wavelength_nm,
            transmission: p.transmission,
            uncertainty: p.uncertainty,
        }),
    )
}

pub fn read_spectrum(path: &Path) -> Result<TransmissionSpectrum, IoError> {
    let rows: Vec<SpectrumRow> = read_csv(path)?;
    TransmissionSpectrum::new(
        rows.into_iter()
            .map(|r| SpectrumPoint {
                wavelength_nm: r.wavelength_nm,
                transmission: r.transmission,
                uncertainty: r.uncertainty,
            })
            .collect(),
        SpectrumSource::SinglePhoton,
    )
    .map_err(|e| IoError::format(path, e))
}

// ============================================================================
// Calibration model files
// ============================================================================

#[derive(Serialize, Deserialize)]
struct ModelFile {
    a: f64,
    b_nm: f64,
    r: f64,
    residual_rms: f64,
}

pub fn write_model(
    path: &Path,
    model: &CalibrationModel,
    residual_rms: f64,
) -> Result<(), IoError> {
    let file = ModelFile {
        a: model.a,
        b_nm: model.b_nm,
        r: model.r,
        residual_rms,
    };
    let text = toml::to_string(&file).map_err(|e| IoError::format(path, e))?;
    write_file(path, text)
}

pub fn read_model(path: &Path) -> Result<(CalibrationModel, f64), IoError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| IoError::format(path, e))?;
    let file: ModelFile = toml::from_str(&text).map_err(|e| IoError::format(path, e))?;
    Ok((
        CalibrationModel {
            a: file.a,
            b_nm: file.b_nm,
            r: file.r,
        },
        file.residual_rms,
    ))
}

// ============================================================================
// Cube directories
// ============================================================================

#[derive(Serialize, Deserialize)]
struct CubeManifest {
    nx: usize,
    ny: usize,
    wavelengths_nm: Vec<f64>,
    plane_files: Vec<String>,
    use_rescaling: bool,
    calibration: CalibrationModel,
    plan: ScanPlan,
}

#[derive(Serialize, Deserialize)]
struct PlaneRow {
    ix: usize,
    iy: usize,
    transmission: f64,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRow {
    plane: usize,
    wavelength_nm: f64,
    position: String,
    level: f64,
    t_s: f64,
}

/// Writes a cube as a directory: `manifest.json`, one
/// `plane_NN.csv` per wavelength (masked pixels omitted), and
/// `references.csv` with the per-plane reference levels.
pub fn write_cube(dir: &Path, cube: &HyperCube) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let plane_files: Vec<String> = (0..cube.wavelengths_nm.len())
        .map(|iw| format!("plane_{iw:02}.csv"))
        .collect();

    let manifest = CubeManifest {
        nx: cube.nx,
        ny: cube.ny,
        wavelengths_nm: cube.wavelengths_nm.clone(),
        plane_files: plane_files.clone(),
        use_rescaling: cube.provenance.use_rescaling,
        calibration: cube.provenance.calibration,
        plan: cube.plan.clone(),
    };
    let mut manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| IoError::format(dir, e))?;
    manifest_json.push('\n');
    write_file(&dir.join("manifest.json"), manifest_json)?;

    for (iw, name) in plane_files.iter().enumerate() {
        let mut rows = Vec::new();
        for iy in 0..cube.ny {
            for ix in 0..cube.nx {
                if let Some(transmission) = cube.value(ix, iy, iw) {
                    rows.push(PlaneRow {
                        ix,
                        iy,
                        transmission,
                    });
                }
            }
        }
        write_csv(&dir.join(name), rows)?;
    }

    let mut reference_rows = Vec::new();
    for refs in &cube.provenance.reference_levels {
        for (position, level) in [("pre", refs.pre), ("post", refs.post)] {
            reference_rows.push(ReferenceRow {
                plane: refs.plane,
                wavelength_nm: refs.wavelength_nm,
                position: position.to_string(),
                level: level.level,
                t_s: level.t_s,
            });
        }
    }
    write_csv(&dir.join("references.csv"), reference_rows)
}

pub fn read_cube(dir: &Path) -> Result<HyperCube, IoError> {
    let manifest_path = dir.join("manifest.json");
    let bytes = read_file(&manifest_path)?;
    let manifest: CubeManifest =
        serde_json::from_slice(&bytes).map_err(|e| IoError::format(&manifest_path, e))?;
    if manifest.plane_files.len() != manifest.wavelengths_nm.len() {
        return Err(IoError::format(
            &manifest_path,
            format!(
                "{} plane files for {} wavelengths",
                manifest.plane_files.len(),
                manifest.wavelengths_nm.len()
            ),
        ));
    }

    let n = manifest.nx * manifest.ny;
    let mut data = vec![0.0; n * manifest.wavelengths_nm.len()];
    let mut mask = vec![false; n * manifest.wavelengths_nm.len()];
    for (iw, name) in manifest.plane_files.iter().enumerate() {
        let path = dir.join(name);
        for row in read_csv::<PlaneRow>(&path)? {
            if row.ix >= manifest.nx || row.iy >= manifest.ny {
                return Err(IoError::format(
                    &path,
                    format!(
                        "pixel ({}, {}) outside the {}x{} grid",
                        row.ix, row.iy, manifest.nx, manifest.ny
                    ),
                ));
            }
            let idx = iw * n + row.iy * manifest.nx + row.ix;
            data[idx] = row.transmission;
            mask[idx] = true;
        }
    }

    let references_path = dir.join("references.csv");
    let rows: Vec<ReferenceRow> = read_csv(&references_path)?;
    let mut reference_levels = Vec::new();
    for plane in 0..manifest.wavelengths_nm.len() {
        let find = |position: &str| -> Result<(RefLevel, f64), IoError> {
            let row = rows
                .iter()
                .find(|r| r.plane == plane && r.position == position)
                .ok_or_else(|| {
                    IoError::format(
                        &references_path,
                        format!("missing {position} reference for plane {plane}"),
                    )
                })?;
            Ok((
                RefLevel {
                    level: row.level,
                    t_s: row.t_s,
                },
                row.wavelength_nm,
            ))
        };
        let (pre, wavelength_nm) = find("pre")?;
        let (post, _) = find("post")?;
        reference_levels.push(PlaneReferences {
            plane,
            wavelength_nm,
            pre,
            post,
        });
    }

    Ok(HyperCube {
        nx: manifest.nx,
        ny: manifest.ny,
        wavelengths_nm: manifest.wavelengths_nm,
        data,
        mask,
        plan: manifest.plan,
        provenance: CubeProvenance {
            calibration: manifest.calibration,
            use_rescaling: manifest.use_rescaling,
            reference_levels,
        },
    })
}

// ============================================================================
// Contrast images
// ============================================================================

#[derive(Serialize, Deserialize)]
struct ContrastRow {
    ix: usize,
    iy: usize,
    value: f64,
}

/// Writes a contrast image; masked pixels are omitted.
pub fn write_contrast(path: &Path, image: &ContrastImage) -> Result<(), IoError> {
    let mut rows = Vec::new();
    for iy in 0..image.ny {
        for ix in 0..image.nx {
            let idx = iy * image.nx + ix;
            if image.mask[idx] {
                rows.push(ContrastRow {
                    ix,
                    iy,
                    value: image.values[idx],
                });
            }
        }
    }
    write_csv(path, rows)
}

// ============================================================================
// Tests
// ============================================================================

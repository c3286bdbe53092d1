//! Command-line entry point for the correlated-pair hyperspectral
//! pipeline.
//!
//! Every stage is driven by one TOML configuration file; flags carry only
//! the config path, an optional seed override, and the output directory.
//! Relative input paths in the configuration resolve against the config
//! file's directory, so by default the stages chain inside that directory.
//! Each run appends its product list to `manifest.json` in the output
//! directory.
//!
//! Errors print one machine-parsable line on stderr: `error: config: …`
//! (exit status 2) for requests that can never work, `error: data: …`
//! (exit status 3) for inputs that failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperspec_core::pipeline::{self, load_config, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "hyperspec",
    version,
    about = "Single-photon hyperspectral imaging pipeline: simulate, gate, correlate, calibrate, assemble, and render synthetic scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding `seed` in the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the configuration file's directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Master seed for the whole demo
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "demo")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic time-tag stream ([simulate] section)
    Simulate(StageArgs),
    /// Histogram a stream, pick gates, and write counting windows ([gate])
    Gate(StageArgs),
    /// Noise statistics and arm correlation over counting windows ([correlate])
    Correlate(StageArgs),
    /// Fit the wavelength-axis/thickness model to a measured spectrum ([calibrate])
    Calibrate(StageArgs),
    /// Assemble a raw scan into a drift-corrected cube ([cube])
    Cube(StageArgs),
    /// Two-wavelength contrast image from a cube ([contrast])
    Contrast(StageArgs),
    /// Mean spectrum of a pixel region from a cube ([spectrum])
    Spectrum(StageArgs),
    /// Run the full synthetic experiment end to end and write a report
    Demo(DemoArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PipelineError::Config(_) => ExitCode::from(2),
                PipelineError::Data(_) => ExitCode::from(3),
            }
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate(args) => stage(args, "simulate", |config, base, out| {
            let path = out.join(&config.simulate.output);
            let s = pipeline::run_simulate(config, base, &path)?;
            println!(
                "wrote {} ({} records over {} cycles, {} bytes)",
                s.path.display(),
                s.records,
                s.cycles,
                s.bytes
            );
            Ok(vec![config.simulate.output.display().to_string()])
        }),
        Command::Gate(args) => stage(args, "gate", |config, base, out| {
            let s = pipeline::run_gate(config, base, out)?;
            println!(
                "signal gate [{}, {}) ps, idler gate [{}, {}) ps (duty {:.2e})",
                s.signal_gate.start_ps,
                s.signal_gate.end_ps(),
                s.idler_gate.start_ps,
                s.idler_gate.end_ps(),
                s.duty_factor
            );
            println!(
                "{} counting windows written to {} ({} trailing cycles dropped)",
                s.windows,
                s.windows_path.display(),
                s.dropped_trailing_cycles
            );
            Ok(vec![
                "histogram_signal.csv".into(),
                "histogram_idler.csv".into(),
                "windows.csv".into(),
            ])
        }),
        Command::Correlate(args) => stage(args, "correlate", |config, base, out| {
            let s = pipeline::run_correlate(config, base, out)?;
            println!(
                "{} windows: mean idler {:.1}, shot noise {:.1}",
                s.windows, s.mean_idler, s.shot_noise
            );
            println!(
                "std raw {:.1} ({:.2}x shot), rescaled {:.1} ({:.2}x shot), Pearson r {:.3}, {} excluded",
                s.std_raw,
                s.std_raw / s.shot_noise,
                s.std_rescaled,
                s.std_rescaled / s.shot_noise,
                s.pearson_r,
                s.excluded_windows
            );
            Ok(vec!["stats.csv".into()])
        }),
        Command::Calibrate(args) => stage(args, "calibrate", |config, base, out| {
            let s = pipeline::run_calibrate(config, base, &out.join("model.toml"))?;
            println!(
                "fitted a = {:.5}, b = {:.3} nm, r = {:.4} (rms {:.3e}, {} iterations, {} points, {} masked)",
                s.model.a,
                s.model.b_nm,
                s.model.r,
                s.residual_rms,
                s.iterations,
                s.points_used,
                s.masked_points
            );
            Ok(vec!["model.toml".into()])
        }),
        Command::Cube(args) => stage(args, "cube", |config, base, out| {
            let s = pipeline::run_cube(config, base, &out.join("cube"))?;
            println!(
                "assembled {}x{} cube with {} planes into {} ({} masked voxels, rescaling {})",
                s.nx,
                s.ny,
                s.planes,
                s.cube_dir.display(),
                s.masked_voxels,
                if s.use_rescaling { "on" } else { "off" }
            );
            Ok(vec!["cube".into()])
        }),
        Command::Contrast(args) => stage(args, "contrast", |config, base, out| {
            let s = pipeline::run_contrast(config, base, &out.join("contrast.csv"))?;
            println!(
                "contrast image at {:.1} nm vs {:.1} nm ({} unmasked pixels) -> {}",
                s.wavelength_a_nm,
                s.wavelength_b_nm,
                s.unmasked_pixels,
                s.path.display()
            );
            Ok(vec!["contrast.csv".into()])
        }),
        Command::Spectrum(args) => stage(args, "spectrum", |config, base, out| {
            let s = pipeline::run_spectrum(config, base, &out.join("spectrum.csv"))?;
            println!(
                "region ({}, {}) {}x{}: {} spectral points -> {}",
                s.region.x0,
                s.region.y0,
                s.region.width,
                s.region.height,
                s.points,
                s.path.display()
            );
            Ok(vec!["spectrum.csv".into()])
        }),
        Command::Demo(args) => {
            let report = pipeline::run_demo(&args.out, args.seed)?;
            println!(
                "demo complete in {} (seed {})",
                args.out.display(),
                args.seed
            );
            println!(
                "calibration: a = {:.5} (true {:.5}), b = {:.3} nm (true {:.3}), r = {:.4} (true {:.4})",
                report.calibration.fitted_a,
                report.calibration.true_a,
                report.calibration.fitted_b_nm,
                report.calibration.true_b_nm,
                report.calibration.fitted_r,
                report.calibration.true_r
            );
            println!(
                "noise: raw {:.2}x shot -> rescaled {:.2}x shot over {} windows (r = {:.3})",
                report.noise.raw_over_shot,
                report.noise.rescaled_over_shot,
                report.noise.windows,
                report.noise.pearson_r
            );
            println!(
                "cube: {}x{}x{} with {} masked voxels; see report.txt",
                report.cube.nx, report.cube.ny, report.cube.planes, report.cube.masked_voxels
            );
            update_manifest(&args.out, "demo", &report.files)
        }
    }
}

/// Loads the configuration, applies the seed override, resolves the output
/// directory, runs the stage body, and records its products in the
/// manifest.
fn stage(
    args: StageArgs,
    name: &str,
    body: impl FnOnce(&PipelineConfig, &Path, &Path) -> Result<Vec<String>, PipelineError>,
) -> Result<(), PipelineError> {
    let (mut config, base) = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    let out = args.out.unwrap_or_else(|| base.clone());
    fs::create_dir_all(&out)
        .map_err(|e| PipelineError::Data(format!("cannot create {}: {e}", out.display())))?;
    let files = body(&config, &base, &out)?;
    update_manifest(&out, name, &files)
}

/// Merges this run's product list into `manifest.json` under the output
/// directory, keyed by subcommand.
fn update_manifest(out: &Path, name: &str, files: &[String]) -> Result<(), PipelineError> {
    let path = out.join("manifest.json");
    let mut map: serde_json::Map<String, serde_json::Value> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?,
        Err(_) => serde_json::Map::new(),
    };
    map.insert(name.to_string(), serde_json::Value::from(files.to_vec()));
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
        .map_err(|e| PipelineError::Data(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text)
        .map_err(|e| PipelineError::Data(format!("cannot write {}: {e}", path.display())))
}

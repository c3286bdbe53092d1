//! Simulation and analysis pipeline for mid-infrared single-photon
//! hyperspectral imaging.
//!
//! The library models a pulsed photon-pair source whose mid-infrared idler
//! beam probes a sample while the near-infrared signal beam stays inside the
//! instrument. Both beams are upconverted and detected by silicon SPADs, so
//! every measurement reduces to time-tagged click streams. The processing
//! chain mirrors the hardware:
//!
//! 1. [`timetag`] — binary time-tag stream format and trigger segmentation
//! 2. [`sim`] — Monte Carlo source model (counts, streams, full scans)
//! 3. [`gating`] — arrival histograms and time-gated window counting
//! 4. [`correlation`] — excess-noise suppression via signal/idler correlation
//! 5. [`calibration`] — wavelength relations and spectral axis calibration
//! 6. [`hypercube`] — scan planning, drift correction, cube assembly
//! 7. [`pipeline`] — file formats and end-to-end orchestration for the CLI
//!
//! Every stochastic operation takes an explicit seed and derives
//! independent, counter-based substreams per work unit ([`rng`]), so results
//! are bit-for-bit reproducible regardless of thread count.

pub mod calibration;
pub mod correlation;
pub mod gating;
pub mod hypercube;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod timetag;

pub use calibration::{AbsorptionCurve, CalibrationModel, TransmissionSpectrum};
pub use gating::{ArrivalHistogram, GateWindow};
pub use hypercube::{HyperCube, ScanPlan};
pub use sim::{PointKind, SourceConfig, WindowCounts};
pub use timetag::{Channel, PulseCycle, StreamHeader, TimeTagRecord};

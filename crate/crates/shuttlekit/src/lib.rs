//! shuttlekit: transport-waveform synthesis and internal-state fidelity
//! analysis for segmented linear Paul traps.
//!
//! The crate covers the full desk-side workflow around shuttling a trapped
//! ion between two segments:
//!
//! - [`trap`]: electrode basis potentials (analytic surrogate or imported
//!   grids) probed for value, gradient and Hessian;
//! - [`trajectory`]: rest-to-rest transport profiles, discretized;
//! - [`filter`]: the dc-electrode low-pass electronics as a discrete
//!   recursion, its exact inverse, and reachable-voltage intervals;
//! - [`synth`]: per-step constrained voltage solves chained through the
//!   filter history into closed-loop forward/backward ramps, plus an
//!   independent ramp audit;
//! - [`motion`]: classical ion dynamics under a ramp, for heating audits;
//! - [`detection`]: thresholded state identification, posterior densities,
//!   bootstrap uncertainty of the identification probabilities, and
//!   preparation-bias corrections;
//! - [`analysis`]: Ramsey fringe likelihood fits, per-transport fidelity
//!   likelihoods with failure and dephasing corrections, and the
//!   fluorescence-tracking transport-fidelity fit;
//! - [`sim`]: synthetic measurement records with known ground truth;
//! - [`cli`] / [`config`]: the config-driven command-line pipeline.
//!
//! Each major capability has a runnable demo under `examples/`.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod detection;
pub mod error;
pub mod filter;
pub mod io;
pub mod motion;
pub mod qp;
pub mod sim;
pub mod synth;
pub mod trajectory;
pub mod trap;

pub use error::{Error, Result};

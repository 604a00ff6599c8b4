//! Generator-based bootstrap and cross-validation for weighted M-estimation.
//!
//! A neural generator is trained so that, given bootstrap (or CV) weights and
//! tuning parameters, its output is the corresponding weighted penalized
//! M-estimate. One trained generator then replaces thousands of independent
//! refits: bootstrap draws, calibrated and studentized intervals, CV curves,
//! and nonparametric mixture posteriors all become forward passes. Exact
//! solvers for every supported family live in [`oracle`] and back the test
//! suites.

pub mod designs;
pub mod error;
pub mod infer;
pub mod io;
pub mod model;
pub mod net;
pub mod npmle;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod train;
pub mod weights;

pub use error::{Error, Result};

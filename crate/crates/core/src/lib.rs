//! Continuous-discrete Kalman filtering for a Faraday-rotation atomic sensor.
//!
//! The crate is `no_std` (it needs `alloc`). The default `std` feature adds
//! FFT-based spectral estimation.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
pub mod linalg;
pub mod filter;
pub mod linear_model;
pub mod riccati;
pub mod sensor;
pub mod simulator;
pub mod spectroscopy;
pub mod validation;

pub use error::{Error, Result};
pub use linear_model::{LinearModel, Propagator, TimeOrdering};
pub use filter::{
    initialize, predict, run_filter, update, FilterRun, GaussianBelief, Observation, Stage,
    StepDiagnostics,
};
pub use riccati::{solve_care, solve_dare, CareOptions, DareMethod, DareOptions, SteadyState};

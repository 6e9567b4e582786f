//! Configuration, artifact IO and experiment drivers for the
//! `kalman-atomsense` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod io;

pub use config::ExperimentConfig;

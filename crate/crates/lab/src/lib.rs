//! Everything around the math of the FreeU toy lab: synthetic data, training,
//! checkpoints, sampling jobs, figure pipelines and the HTTP service.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod figures;
pub mod job;
pub mod service;
pub mod train;

pub use error::{LabError, Result};

//! Discrepancy-aware attention network for audio-visual (generalized)
//! zero-shot learning, on a small tape-based autodiff engine.

pub mod csgm;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qdma;
pub mod runner;
pub mod tcn;
pub mod tensor;

pub use error::{DaanError, Result};

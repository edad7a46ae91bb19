//! Operator learning with PCA encoders and ReLU networks.
//!
//! The crate covers the full pipeline: grid fields and their inner products,
//! empirical PCA, a small MLP library, Darcy and periodic Navier-Stokes data
//! generators, an explicit ReLU emulation of a spectral Navier-Stokes scheme,
//! PCA-Net assembly with error diagnostics, and numerical studies.

pub mod darcy;
pub mod error;
pub mod experiments;
pub mod field;
pub mod io;
pub mod nn;
pub mod ns_relu;
mod fft;
pub mod pca;
pub mod pcanet;
pub mod rng;
pub mod spectral_ns;
pub mod verify;

pub use error::{Error, Result};

//! Query-conditioned sound separation by spectrogram masking.

pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod sepnet;
pub mod spectral;
pub mod synthdata;
pub mod training;
pub mod wav;

pub use error::{Error, Result};

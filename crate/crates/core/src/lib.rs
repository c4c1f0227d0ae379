//! Multi-scale attention network (MAN) for single-image super-resolution.
//!
//! The crate carries its own NCHW tensor type and reverse-mode tape
//! ([`tensor`]), the network family and its complexity counters ([`arch`]),
//! bicubic degradation and patch sampling ([`data`]), Adam with cosine
//! annealing plus the weight/checkpoint format ([`optim`]), the Y-channel
//! PSNR/SSIM protocol ([`metrics`]) and the TOML run configuration
//! ([`config`]).

pub mod arch;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};

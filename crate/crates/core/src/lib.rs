//! Pyramidal neural video representation.
//!
//! A NeRV system fits a decoder network plus per-frame embeddings to a single
//! video clip by overfitting. This crate implements the pyramidal variant:
//! a six-block upsampling mainstream fed by Kronecker-factorized shortcut
//! upscalers ([`kfc`]) that inject a coarse temporal embedding into the middle
//! layers through a gated fusion unit ([`bsm`]).
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape`]) over dense
//! `f64` feature maps ([`tensor`]), so every layer is checkable against
//! central finite differences. The remaining modules cover the surrounding
//! pipeline: training ([`trainer`]), quality metrics ([`metrics`]), 8-bit
//! post-training compression ([`codec`]), raw video I/O ([`video`]) and the
//! modulus-of-continuity dynamics profiler ([`uat`]).

pub mod bsm;
pub mod codec;
pub mod error;
pub mod kfc;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod uat;
pub mod video;

pub use error::{Error, Result};
pub use tensor::Tensor3;
pub use video::VideoClip;

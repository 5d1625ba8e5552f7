//! Time-domain heart sound (PCG) classification.
//!
//! The crate covers the whole pipeline:
//!
//! - [`audio`]: WAV I/O, polyphase resampling and length standardisation
//! - [`codec`]: lossy-codec augmentation through an external transcoder
//!   or a built-in MDCT simulator, plus a spectral distortion measure
//! - [`dataset`]: manifests, stratified folds with parent-grouped codec
//!   copies, synthetic PCG generation and batch loading
//! - [`tensor`]: a small reverse-mode autodiff engine, Adam and a
//!   finite-difference gradient checker
//! - [`model`]: the M5 raw-waveform CNN
//! - [`train`]: k-fold cross-validation and checkpoint evaluation
//! - [`cli`]: the `murmur` command line

pub mod audio;
pub mod cli;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod verify;

pub use audio::AudioClip;
pub use error::{Error, Result};

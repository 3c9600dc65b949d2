//! 3D coherent X-ray diffraction imaging toolkit: centered-FFT volume core,
//! synthetic particle generation, conventional iterative phase retrieval
//! (ER/HIO/shrink-wrap), a from-scratch 3D convolutional encoder-decoder with
//! hand-derived backward passes, supervised training, unsupervised
//! (deep-image-prior style) refinement, and ensemble analysis.

pub mod analysis;
pub mod cxv;
pub mod datagen;
pub mod error;
pub mod iterative;
pub mod metrics;
pub mod neuralnet;
pub mod optimize;
pub mod volume;

pub use error::{CxdiError, Result};

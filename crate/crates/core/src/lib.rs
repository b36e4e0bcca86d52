//! Anatomically-informed detection of intracranial aneurysms in TOF-MRA.
//!
//! The crate covers the whole desk-scale pipeline: NIfTI-1 I/O, BIDS
//! indexing and grouped splits, volume numerics, spherical weak labels,
//! anatomically-informed patch sampling, a pluggable patch predictor
//! (including a 3D UNet forward pass), sliding-window inference with
//! test-time augmentation, and detection evaluation with PHASES-based
//! risk stratification.

pub mod affine;
pub mod augment;
pub mod bids;
pub mod components;
pub mod error;
pub mod evaluation;
pub mod nifti;
pub mod phases;
pub mod rng;
pub mod sampler;
pub mod sliding_window;
pub mod synth;
pub mod unet;
pub mod volume;
pub mod weak_labels;

pub use affine::{apply_affine, Affine4x4};
pub use components::{connected_components, Component, Connectivity};
pub use error::{Error, Result};
pub use volume::{Grid3, Interpolation, Volume3D};

//! Anatomical feature-prioritized (AFP) loss for 3D cross-modality volume
//! translation.
//!
//! This crate holds everything that does not touch the filesystem: volume
//! containers, the preprocessing pipeline, procedural phantoms, a small
//! tape-based 3D CNN engine, the segmentation backbone used as a frozen
//! feature extractor, the translation network with its losses, the patch
//! engine and the evaluation metrics. It builds without `std` (only `alloc`
//! is required); the `std` feature turns on runtime SIMD detection in the
//! matrix kernels.
//!
//! All 3D arrays are stored in `(z, y, x)` order with `x` varying fastest.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod phantom;
pub mod preprocess;
pub mod real;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{Geometry, LabelVolume, Modality, Shape3, Volume, VolumePair};

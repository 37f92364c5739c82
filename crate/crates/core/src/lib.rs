//! Local speed-of-sound adaptive plane-wave beamforming.
//!
//! The crate simulates plane-wave channel data, estimates a slowness map from
//! apparent axial displacements between angled frames by limited-angle
//! tomography, and beamforms with straight-ray delays through that map.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamformer;
pub mod error;
pub mod export;
pub mod forward_sim;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod raytrace;
pub mod recon;
pub mod slowness;
pub mod sparse;
pub mod tracking;

pub use error::{Error, ErrorKind, Result};

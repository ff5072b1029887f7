//! Lossy compression of gridded atmospheric fields with implicit neural
//! representations.
//!
//! A frame is split into low, mid and high spatial-frequency bands. The high
//! band is kept as a sparse matrix, the low band goes through a multi-scale
//! pyramid of sine-activated networks, and the mid band is fitted block by
//! block on an adaptive octree. Later frames of a series can reuse the first
//! frame's networks.

pub mod config;
pub mod container;
pub mod error;
pub mod fic;
pub mod field;
pub mod idm;
pub mod metrics;
pub mod mim;
mod par;
pub mod siren;
pub mod spectral;
pub mod ssm;
pub mod synth;
pub mod timing;
pub mod trc;

pub use error::{HihaError, Result};
pub use par::with_threads;

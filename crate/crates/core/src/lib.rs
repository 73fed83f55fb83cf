//! Numerical core for synthetic radiotherapy dose prediction.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): voxel grids and
//! structure sets, phantom synthesis, fluence optimization, the
//! distance-rank / DVH-mapping input encoding, a from-scratch 3D UNet with
//! hand-written backward passes, the training loops and the evaluation
//! metrics. File formats, configuration and the command line live in the
//! `dosekit` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod nn;
pub mod phantom;
pub mod planner;
pub mod preprocess;
pub mod seed;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

//! Certified ownership verification for conditional generators.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod attack;
pub mod certify;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod image;
pub mod params;
pub mod pilot;
pub mod rng;
pub mod stats;
pub mod toymodel;
pub mod verify;

pub use error::{Error, Result};
pub use params::{LayeredParams, NoiseSpec, TrainingTrajectory};

//! Breathing-trace conditioned respiratory motion simulation.
//!
//! A static volume plus a 1D breathing trace goes in; a sequence of
//! displacement fields and warped phase images comes out. The crate also
//! carries the analytic phantom used as ground truth, the metrics used to
//! judge predictions, and the augmentation pipeline that packages synthetic
//! phases for downstream registration training.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the 64-bit variants used by the tools.

pub mod augment;
pub mod autodiff;
pub mod csvio;
pub mod error;
pub mod field;
mod interp;
pub mod metrics;
pub mod mhd;
pub mod model;
pub mod phantom;
pub mod scalar;
pub mod trace;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use field::Dvf;
pub use model::{RMSimConfig, RMSimModel};
pub use trace::BreathingTrace;
pub use scalar::Scalar;
pub use volume::{Grid, LandmarkSet, Mask3D, Volume3D};

pub type Volume = Volume3D<f64>;
pub type Field = Dvf<f64>;
pub type Model = model::RMSimModel<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Phantom = phantom::PhantomSequence<f64>;
pub type Predicted = model::Prediction<f64>;

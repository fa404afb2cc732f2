//! Flow matching for crystals with substitutional and positional disorder.

pub mod crystal;
pub mod data;
pub mod discretize;
pub mod elements;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod sampler;
pub mod selftest;
pub mod state;
pub mod training;

pub use crystal::{DisorderedCrystal, LatticeParams, Site};
pub use error::{Error, Result};
pub use state::{FlowState, VelocityBundle};

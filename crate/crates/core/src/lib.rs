//! Masked bird's-eye-view perception on a synthetic surround-camera world.

pub mod backbone;
pub mod detection;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod mvr;
pub mod nn;
pub mod pipeline;
pub mod positional;
pub mod world;

pub use error::{MbevError, Result};

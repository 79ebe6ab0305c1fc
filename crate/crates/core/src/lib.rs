//! Volumetric segmentation with parallel multi-resolution 3D Swin Transformer streams.

pub mod attention;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod tape;
pub mod topology;
pub mod training;
pub mod volume_io;
pub mod windowing;

pub use error::{HrstError, Result};

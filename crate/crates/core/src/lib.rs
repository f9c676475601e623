//! Sparse quadtree refinement of coarse instance masks.

pub mod detector;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod pyramid;
pub mod quadtree;
pub mod refiner;
pub mod synth;

pub use error::{Error, Result};
pub use mask::{BinaryMask, IncoherencePyramid, ProbMap};

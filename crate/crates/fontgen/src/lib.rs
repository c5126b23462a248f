//! Few-shot glyph generation: a content glyph plus a handful of style samples
//! go in, a glyph rendered in that style comes out. Style is learned
//! contrastively against a per-class memory of cluster centers, and a
//! multi-task patch discriminator scores content and style separately.

pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod msp;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod style_memory;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};

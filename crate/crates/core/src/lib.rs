//! Hierarchical semantic decoding, dynamic aggregation and object counting for
//! generalized referring expression segmentation, at a scale that trains on one CPU core.

pub mod aoc;
pub mod config;
pub mod dha;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod sdm;
pub mod synthgres;
pub mod toyenc;

pub use error::{Error, Result};

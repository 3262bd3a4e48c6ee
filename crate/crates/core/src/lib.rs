//! Flow-matching protein structure generation.
//!
//! Structures enter through [`structure`] and [`features`], a transformer
//! velocity field lives in [`model`], training in [`flow`] and [`train`],
//! generation in [`sampler`], and scoring in [`metrics`] and [`confidence`].

pub mod embedding;
pub mod confidence;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod residues;
pub mod sampler;
pub mod structure;
pub mod train;

pub use error::{CoreError, Result};

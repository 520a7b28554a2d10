//! Masked generative transformer image editing at toy scale.
//!
//! Pipeline: a [`tokenizer::Palette`] turns images into token grids; a
//! bidirectional [`model::Model`] reads `[instruction; iterate; condition]`
//! with a condition-strength attention bias; the [`sampler`] decodes masked
//! tokens in parallel under a cosine schedule; [`consolidation`] and
//! [`region_hold`] turn text-to-image attention into a localization map and
//! revert low-relevance tokens to the source after every step.

pub mod consolidation;
pub mod error;
pub mod io;
pub mod model;
pub mod parallel;
pub mod region_hold;
pub mod rng;
pub mod sampler;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{BiasSpec, Model, ModelConfig, TokenStreams};
pub use tokenizer::{Image, Palette, TokenGrid, MASK_TOKEN};

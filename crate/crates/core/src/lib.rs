//! Nearest-neighbor augmented sequence generation.
//!
//! A base model's decoder states are memorized into a key–value
//! [`datastore`]; at generation time a [`retriever`] looks up the nearest
//! keys for the current state and a [`combiner`] mixes the induced token
//! distribution with the model's own. [`compression`] shrinks the store and
//! [`pipeline`] ties everything into decoding, evaluation and inspection
//! traces.

pub mod combiner;
pub mod compression;
pub mod corpus;
pub mod datastore;
pub mod distribution;
pub mod error;
pub mod fingerprint;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod retriever;
pub mod synth;
pub mod trace;
pub mod vocab;

pub use error::{Error, Result};

//! Multimodal protein understanding: structure and sequence encoders whose
//! per-residue features are projected, fused and spliced into a causal text
//! decoder, trained in two stages on instruction data.

pub mod autograd;
pub mod config;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradcheck;
pub mod instruction_data;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod projector;
pub mod protein_io;
pub mod sequence_encoder;
pub mod structure_encoder;
pub mod training;

pub use error::{Error, ErrorClass, Result};

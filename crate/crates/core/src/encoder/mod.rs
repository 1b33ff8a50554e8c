//! Transformer encoder variants with exact parameter accounting.

mod config;
mod model;

pub use config::{count_parameters, preset, EncoderConfig, Preset, Scale};
pub use model::{
    EncodedBatch, EncoderLayer, EncoderOutput, Embeddings, ForwardTrace, LayerNormParams, Linear,
    Model,
};

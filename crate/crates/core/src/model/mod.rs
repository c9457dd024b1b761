//! Encoder–decoder transformer: configuration, parameters and forward passes.

mod config;
mod forward;
mod incremental;
mod params;

pub use config::{ModelConfig, LAYER_NORM_EPS};
pub use forward::{decoder_forward, encode, sinusoidal_pe, Memory};
pub(crate) use forward::{decode_traced, decoder_graph, encode_traced, encoder_graph, Packed};
pub use incremental::IncrementalDecoder;
pub use params::{fan_in_bound, init_bound, init_model, xavier_bound, BoundParams, ModelParams, INIT_STREAM};

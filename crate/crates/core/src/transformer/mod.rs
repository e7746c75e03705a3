//! Encoder-decoder transformer: configuration, parameters, layers and the
//! full model.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;
pub mod pe;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Activation, EmbedScale, ModelConfig, NormPlacement, PeMode, BOS, EOS, FIRST_PAYLOAD, PAD};
pub use layers::{activate, activate_grad, ffn_forward, ffn_rows, layer_norm, layer_norm_rows, sublayer};
pub use model::{
    attention_maps, decode, encode, forward_batch, greedy_generate, greedy_generate_batch, AttentionMaps, ForwardTape,
};
pub use params::{DecoderLayerParams, EncoderLayerParams, FfnParams, LayerNormParams, ModelParams};
pub use pe::{pe_offset_matrix, sinusoidal_pe};

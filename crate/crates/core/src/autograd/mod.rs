//! Hand-derived reverse-mode gradients and the finite-difference oracle
//! that validates them.

pub mod gradcheck;
pub mod model;
pub mod ops;

pub use gradcheck::{finite_diff_check, run_all, run_suite, SuiteReport};
pub use model::{model_backward, Gradients};
pub use ops::{
    attention_backward, attention_forward, ffn_backward, ffn_forward_taped, layer_norm_backward, layer_norm_forward,
    softmax_backward, AttentionGrads, AttentionTape, FfnTape, LayerNormTape,
};

//! Minimal numeric engine: tensors, parameters, reverse-mode gradients and
//! transformer blocks.

mod config;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use config::EncoderConfig;
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, Probe};
pub use graph::{Backward, Graph, Var, LAYER_NORM_EPS, LEAKY_RELU_SLOPE};
pub use layers::{multi_head_attention, Attended, CoAttended, CoAttentionLayer, LayerNorm, Linear, TransformerLayer};
pub use params::{Grads, ParamId, ParamStore, Precision, CHECKPOINT_VERSION};
pub use tensor::Tensor;

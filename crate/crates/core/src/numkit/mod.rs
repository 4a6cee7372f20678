//! Dense tensor math with hand-written backward passes.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use attention::{attention_block, init_block, AttentionBlock, BlockTrace};
pub use gradcheck::{grad_check, probe};
pub use layers::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, softmax_backward, softmax_rows, Linear,
};
pub use params::{LayerParams, ParamGrads};
pub use scalar::{lit, DType, Scalar};
pub use tensor::{dot, l2_norm, Tensor};

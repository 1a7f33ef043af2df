//! Differentiable numeric kernels with hand-written backward passes.

mod attention;
mod gradcheck;
mod kernels;
mod layers;
mod param;
mod tensor;

pub use attention::{
    multi_head_attention, multi_head_attention_backward, Attention, AttentionCache, AttentionConfig,
    AttentionGrads, AttentionWeights,
};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
pub use kernels::{
    conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear_backward,
    linear_forward, relu, relu_backward, softmax, softmax_rows, softmax_rows_backward, LayerNormCache,
    LAYER_NORM_EPS,
};
pub use layers::{LayerNorm, Linear, Mlp, MlpCache};
pub use param::{truncated_normal, Grads, ParamId, ParamStore, Parameter, WeightInit};
pub use tensor::{dot, l2_norm, matmul, Tensor};
pub(crate) use tensor::gemm;

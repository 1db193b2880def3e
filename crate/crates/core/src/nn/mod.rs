//! Minimal neural-network layer library: dense tensors, transformer encoder
//! blocks, and hand-written backward passes. Scalar semantics are normative;
//! there is no implicit parallelism in any forward or backward pass.

pub mod layers;
pub mod tensor;

pub use layers::{
    gelu, gelu_grad, randn_tensor, Embedding, EncoderLayer, FeedForward, LayerNorm, Linear,
    SelfAttention,
};
pub use tensor::{matmul, matmul_grad_a, matmul_grad_b, matmul_nt, matmul_tn, Param, Tensor};

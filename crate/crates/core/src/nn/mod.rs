//! Dense tensors, named parameters, and the differentiable operations the
//! model is built from.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_gradcheck, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use ops::{
    cross_entropy, layer_norm, mlp_forward, multi_head_attention, softmax, AttentionParams, Dense,
    Mlp,
};
pub use params::{GradientMap, ParameterStore};
pub use tensor::Tensor;

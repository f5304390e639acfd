//! Differentiable substrate: matrices, the reverse-mode tape, parameter
//! storage, layers, Adam, gradient checking and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod ops;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use layers::{Attention, Gru, LayerNorm, Linear, Mlp2};
pub use mat::Mat;
pub use params::{Init, ParamBlock, ParamGrads, ParamId, ParamStore};
pub use tape::{AttentionMask, Gradients, Tape, Var};

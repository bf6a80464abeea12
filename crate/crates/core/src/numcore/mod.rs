//! Dense tensors, reverse-mode differentiation and the small layer set the
//! MIL model needs.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod normalize;
mod real;
pub mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{forward_layer, forward_layer_eager, Activation, BoundLayer, LayerKind, LayerParams};
pub use normalize::{minmax_normalize, minmax_normalize_in_place};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

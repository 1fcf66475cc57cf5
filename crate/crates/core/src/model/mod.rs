//! The frozen base transformer and its insertion slots.
//!
//! The base is an L-layer decoder: token embedding, then per layer a
//! multi-head self-attention sublayer and a ReLU feed-forward sublayer, each
//! wrapped in a residual connection with layer normalization, then an output
//! projection to vocabulary logits. Every parameter is frozen.
//!
//! PEFT modules interact with the base only through the hooks registered in
//! a [`HookMap`]; see [`SlotId`] for the insertion points. Virtual tokens
//! prepended at [`SlotId::EmbeddingOutput`] take positions `0..n`, shifting
//! the real tokens right.

mod base;
mod config;
mod slots;

pub use base::{
    attend, causal_mask, forward_with_hooks, linear, residual_flow_view, BaseModel, ForwardTrace, LayerParams,
    LayerTrace,
};
pub use config::{BaseConfig, NormPlacement};
pub use slots::{Hook, HookMap, SlotId, SlotValue};

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid base config: {0}")]
    Config(String),
    #[error("layer {layer} out of range for a {num_layers}-layer model")]
    Index { layer: usize, num_layers: usize },
    #[error("slot {slot}: hook returned shape {got:?}, expected {expected}")]
    SlotContract {
        slot: SlotId,
        expected: String,
        got: Vec<usize>,
    },
    #[error("slot {slot}: hook returned a {got} value, expected {expected}")]
    SlotKind {
        slot: SlotId,
        expected: &'static str,
        got: &'static str,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

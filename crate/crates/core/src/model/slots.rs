use std::collections::BTreeMap;
use std::fmt;

use super::ModelError;
use crate::tensor::{Tape, Var};
use crate::typology::Workspace;

/// Named insertion point in the base forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotId {
    /// Token embeddings `[batch, seq, d_m]`, before positional terms are added.
    EmbeddingOutput,
    /// Query and value projections of a layer together with the frozen
    /// projection weights that produced them.
    AttnQueryValueWeights(usize),
    /// Key and value sequences of a layer, before the heads are split.
    AttnKeysValues(usize),
    /// Attention sublayer output (after the output projection, before the
    /// residual addition).
    PostAttention(usize),
    /// FFN activation after the nonlinearity `[batch, seq, ffn_dim]`.
    FfnIntermediate(usize),
    /// FFN sublayer output, before the residual addition.
    PostFfn(usize),
}

impl SlotId {
    pub fn layer(self) -> Option<usize> {
        match self {
            SlotId::EmbeddingOutput => None,
            SlotId::AttnQueryValueWeights(l)
            | SlotId::AttnKeysValues(l)
            | SlotId::PostAttention(l)
            | SlotId::FfnIntermediate(l)
            | SlotId::PostFfn(l) => Some(l),
        }
    }

    /// The workspace category this slot belongs to.
    pub fn workspace(self) -> Workspace {
        match self {
            SlotId::EmbeddingOutput => Workspace::EmbeddingLayer,
            SlotId::AttnQueryValueWeights(_) => Workspace::AttentionQueriesValues,
            SlotId::AttnKeysValues(_) => Workspace::AttentionKeysValues,
            SlotId::PostAttention(_) => Workspace::AttentionLayer,
            SlotId::FfnIntermediate(_) => Workspace::FfnIntermediate,
            SlotId::PostFfn(_) => Workspace::FfnLayer,
        }
    }

    /// Every slot of an `num_layers`-layer model, in forward order.
    pub fn all(num_layers: usize) -> Vec<SlotId> {
        let mut out = vec![SlotId::EmbeddingOutput];
        for l in 0..num_layers {
            out.extend([
                SlotId::AttnQueryValueWeights(l),
                SlotId::AttnKeysValues(l),
                SlotId::PostAttention(l),
                SlotId::FfnIntermediate(l),
                SlotId::PostFfn(l),
            ]);
        }
        out
    }

    pub fn validate(self, num_layers: usize) -> Result<(), ModelError> {
        match self.layer() {
            Some(l) if l >= num_layers => Err(ModelError::Index { layer: l, num_layers }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotId::EmbeddingOutput => write!(f, "EmbeddingOutput"),
            SlotId::AttnQueryValueWeights(l) => write!(f, "AttnQueryValueWeights({l})"),
            SlotId::AttnKeysValues(l) => write!(f, "AttnKeysValues({l})"),
            SlotId::PostAttention(l) => write!(f, "PostAttention({l})"),
            SlotId::FfnIntermediate(l) => write!(f, "FfnIntermediate({l})"),
            SlotId::PostFfn(l) => write!(f, "PostFfn({l})"),
        }
    }
}

/// Value(s) flowing through a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotValue {
    Hidden(Var),
    QueryValue {
        /// Input the frozen projections consumed, `[batch, seq, d_m]`.
        input: Var,
        w_query: Var,
        w_value: Var,
        query: Var,
        value: Var,
    },
    KeysValues {
        keys: Var,
        values: Var,
    },
}

impl SlotValue {
    pub fn kind(&self) -> &'static str {
        match self {
            SlotValue::Hidden(_) => "hidden",
            SlotValue::QueryValue { .. } => "query/value",
            SlotValue::KeysValues { .. } => "keys/values",
        }
    }
}

/// Receives a slot's current value and returns its replacement.
pub type Hook<'a> = Box<dyn Fn(&Tape, SlotId, SlotValue) -> Result<SlotValue, ModelError> + 'a>;

/// Slot-indexed hook registry consulted by the forward pass.
#[derive(Default)]
pub struct HookMap<'a> {
    hooks: BTreeMap<SlotId, Hook<'a>>,
}

impl<'a> HookMap<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `hook` at `slot`, returning any hook it displaced.
    pub fn insert(
        &mut self,
        slot: SlotId,
        hook: impl Fn(&Tape, SlotId, SlotValue) -> Result<SlotValue, ModelError> + 'a,
    ) -> Option<Hook<'a>> {
        self.hooks.insert(slot, Box::new(hook))
    }

    pub fn get(&self, slot: SlotId) -> Option<&Hook<'a>> {
        self.hooks.get(&slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotId> + '_ {
        self.hooks.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub(crate) fn apply(&self, tape: &Tape, slot: SlotId, value: SlotValue) -> Result<SlotValue, ModelError> {
        match self.hooks.get(&slot) {
            Some(h) => h(tape, slot, value),
            None => Ok(value),
        }
    }
}

impl fmt::Debug for HookMap<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.hooks.keys()).finish()
    }
}

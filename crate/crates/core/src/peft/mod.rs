//! The seven PEFT techniques behind one plugin contract.
//!
//! A [`PeftModule`] owns its trainable tensors, declares which slots it binds
//! and how its output is integrated there, and computes its contribution
//! when the base forward pass reaches one of those slots. Base tensors are
//! never part of a module.

mod adapter;
mod compacter;
mod compose;
mod ia3;
mod lora;
mod prefix;
mod prompt;
mod tiny_attention;

pub use adapter::Adapter;
pub use compacter::{kron_sum, Compacter};
pub use compose::{attach, ComposedModel};
pub use ia3::Ia3;
pub use lora::Lora;
pub use prefix::{prefix_attention_forms, prefix_mass, PrefixExport, PrefixTuning};
pub use prompt::PromptTuning;
pub use tiny_attention::TinyAttention;

use std::fmt;

use crate::model::{BaseConfig, HookMap, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::typology::{IntegrationKind, PeftDescriptor, Technique, TypologyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PeftError {
    #[error("invalid PEFT config: {0}")]
    Config(String),
    #[error("composition error: {0}")]
    Composition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Typology(#[from] TypologyError),
}

impl From<TensorError> for PeftError {
    fn from(e: TensorError) -> Self {
        PeftError::Model(ModelError::Tensor(e))
    }
}

/// How a module's output enters the base model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntegrationForm {
    /// Module rows are prepended along the sequence axis.
    Concatenation,
    /// `h + λ·Δh`
    ScaledAddition(f64),
    /// `h + Δh`
    DirectAddition,
    /// `(1 − λ)·h + λ·Δh`, `λ ∈ [0, 1]`
    GatedAddition(f64),
    /// `h ⊙ v` along the last axis
    Rescaling,
}

impl IntegrationForm {
    pub fn kind(self) -> IntegrationKind {
        match self {
            IntegrationForm::Concatenation => IntegrationKind::Concatenation,
            IntegrationForm::ScaledAddition(_) => IntegrationKind::ScaledAddition,
            IntegrationForm::DirectAddition => IntegrationKind::DirectAddition,
            IntegrationForm::GatedAddition(_) => IntegrationKind::GatedAddition,
            IntegrationForm::Rescaling => IntegrationKind::Rescaling,
        }
    }

    /// Combines the base value `h` with the module output `delta`.
    pub fn integrate(self, tape: &Tape, h: Var, delta: Var) -> Result<Var, TensorError> {
        match self {
            IntegrationForm::Concatenation => tape.concat(&[delta, h], 1),
            IntegrationForm::ScaledAddition(lambda) => tape.add(h, tape.scale(delta, lambda)),
            IntegrationForm::DirectAddition => tape.add(h, delta),
            IntegrationForm::GatedAddition(lambda) => {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(TensorError::Domain {
                        op: "gated_addition",
                        reason: format!("gate {lambda} outside [0, 1]"),
                    });
                }
                tape.add(tape.scale(h, 1.0 - lambda), tape.scale(delta, lambda))
            }
            IntegrationForm::Rescaling => tape.scale_last(h, delta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binding {
    pub slot: SlotId,
    pub form: IntegrationForm,
}

/// Where a trainable tensor is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Outside the repeated layers (embedding layer).
    Embedding,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub site: Site,
    pub tensor: Tensor,
}

/// Ordered, named trainable tensors of one module.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor and marks it trainable.
    pub fn push(&mut self, name: impl Into<String>, site: Site, tensor: Tensor) {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            site,
            tensor: tensor.with_requires_grad(true),
        });
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.params[i].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.params[i].tensor
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Tape key under which a parameter is recorded.
    pub fn tape_key(name: &str) -> String {
        format!("peft.{name}")
    }

    /// Records `name` on the tape (once per tape).
    pub fn bind(&self, tape: &Tape, name: &str) -> Var {
        tape.param(&Self::tape_key(name), self.get(name))
    }

    /// Overwrites a tensor's values; shapes must agree.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<(), PeftError> {
        let i = self
            .index(name)
            .ok_or_else(|| PeftError::Config(format!("module has no tensor `{name}`")))?;
        let t = &mut self.params[i].tensor;
        if t.shape() != value.shape() {
            return Err(PeftError::Config(format!(
                "tensor `{name}` has shape {:?}, value has {:?}",
                t.shape(),
                value.shape()
            )));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Activation between the two prefix reparameterization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixActivation {
    Softmax,
    Tanh,
}

impl PrefixActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            PrefixActivation::Softmax => "softmax",
            PrefixActivation::Tanh => "tanh",
        }
    }
}

/// Hyperparameters shared by all builders; each technique reads the
/// fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftHyperparams {
    /// Virtual tokens for prompt and prefix tuning (`n`).
    pub n_virtual_tokens: usize,
    /// Adapter and compacter bottleneck width (`d_h`).
    pub bottleneck_dim: usize,
    /// LoRA rank (`r`).
    pub lora_rank: usize,
    /// LoRA scale (`λ`).
    pub lora_scale: f64,
    /// Prefix key/value width; `None` means the full model width.
    pub prefix_dim: Option<usize>,
    pub prefix_activation: PrefixActivation,
    /// Number of Kronecker terms and size of each shared factor (`N`).
    pub kron_order: usize,
    /// Tiny-attention projection width (`d_t`).
    pub tiny_dim: usize,
    /// Bias terms in adapter layers.
    pub adapter_biases: bool,
    /// Layers receiving a module; `None` means all layers.
    pub layers: Option<Vec<usize>>,
    /// Seed for the module's random initialization.
    pub seed: u64,
}

impl Default for PeftHyperparams {
    fn default() -> Self {
        Self {
            n_virtual_tokens: 8,
            bottleneck_dim: 4,
            lora_rank: 2,
            lora_scale: 1.0,
            prefix_dim: None,
            prefix_activation: PrefixActivation::Softmax,
            kron_order: 2,
            tiny_dim: 1,
            adapter_biases: false,
            layers: None,
            seed: 0,
        }
    }
}

impl PeftHyperparams {
    pub fn insertion_layers(&self, base: &BaseConfig) -> Result<Vec<usize>, PeftError> {
        match &self.layers {
            None => Ok((0..base.num_layers).collect()),
            Some(ls) => {
                if ls.is_empty() {
                    return Err(PeftError::Config("empty insertion layer set".into()));
                }
                let mut sorted = ls.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if let Some(&bad) = sorted.iter().find(|&&l| l >= base.num_layers) {
                    return Err(PeftError::Config(format!(
                        "insertion layer {bad} out of range for {} layers",
                        base.num_layers
                    )));
                }
                Ok(sorted)
            }
        }
    }

    /// Canonical `key=value;` text, stored in checkpoint headers.
    pub fn canonical_text(&self) -> String {
        let layers = match &self.layers {
            None => "all".to_string(),
            Some(ls) => ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        };
        let prefix_dim = self.prefix_dim.map_or("model".to_string(), |d| d.to_string());
        format!(
            "n_tokens={};bottleneck={};rank={};scale={};prefix_dim={};prefix_act={};kron={};tiny={};biases={};layers={};seed={};",
            self.n_virtual_tokens,
            self.bottleneck_dim,
            self.lora_rank,
            self.lora_scale,
            prefix_dim,
            self.prefix_activation.as_str(),
            self.kron_order,
            self.tiny_dim,
            self.adapter_biases,
            layers,
            self.seed
        )
    }

    pub fn parse_canonical(text: &str) -> Result<Self, PeftError> {
        let mut hp = PeftHyperparams::default();
        let bad = |k: &str, v: &str| PeftError::Config(format!("bad hyperparameter value `{v}` for `{k}`"));
        for pair in text.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| PeftError::Config(format!("malformed hyperparameter `{pair}`")))?;
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k {
                "n_tokens" => hp.n_virtual_tokens = num()?,
                "bottleneck" => hp.bottleneck_dim = num()?,
                "rank" => hp.lora_rank = num()?,
                "scale" => hp.lora_scale = v.parse().map_err(|_| bad(k, v))?,
                "prefix_dim" => hp.prefix_dim = if v == "model" { None } else { Some(num()?) },
                "prefix_act" => {
                    hp.prefix_activation = match v {
                        "softmax" => PrefixActivation::Softmax,
                        "tanh" => PrefixActivation::Tanh,
                        _ => return Err(bad(k, v)),
                    }
                }
                "kron" => hp.kron_order = num()?,
                "tiny" => hp.tiny_dim = num()?,
                "biases" => hp.adapter_biases = v.parse().map_err(|_| bad(k, v))?,
                "layers" => {
                    hp.layers = if v == "all" {
                        None
                    } else {
                        Some(
                            v.split(',')
                                .map(|s| s.parse::<usize>().map_err(|_| bad(k, v)))
                                .collect::<Result<_, _>>()?,
                        )
                    }
                }
                "seed" => hp.seed = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(PeftError::Config(format!("unknown hyperparameter `{k}`"))),
            }
        }
        Ok(hp)
    }
}

pub(crate) fn positive(name: &str, v: usize) -> Result<(), PeftError> {
    if v == 0 {
        return Err(PeftError::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

/// Uniform PEFT plugin contract.
pub trait PeftModule: Send + Sync + fmt::Debug {
    fn technique(&self) -> Technique;

    /// Self-declared structural descriptor.
    fn descriptor(&self) -> PeftDescriptor;

    /// Slots this module reads and writes, with the integration form used
    /// at each. Constant for the module's lifetime.
    fn bindings(&self) -> Vec<Binding>;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    fn hyperparams(&self) -> &PeftHyperparams;

    /// Config of the base this module was built for.
    fn base_config(&self) -> &BaseConfig;

    /// Computes the module's effect at one of its bound slots.
    fn apply(&self, tape: &Tape, slot: SlotId, value: SlotValue) -> Result<SlotValue, ModelError>;

    fn clone_box(&self) -> Box<dyn PeftModule>;

    /// Checkpoint payload variant; only exported prefixes differ.
    fn variant(&self) -> &'static str {
        "full"
    }

    /// Form written to disk; only prefixes reduce to a smaller payload.
    fn exported(&self) -> Box<dyn PeftModule> {
        self.clone_box()
    }

    /// One hook per bound slot.
    fn hooks(&self) -> HookMap<'_> {
        let mut map = HookMap::new();
        for b in self.bindings() {
            map.insert(b.slot, move |tape: &Tape, slot: SlotId, value: SlotValue| {
                self.apply(tape, slot, value)
            });
        }
        map
    }

    /// Trainable tensors by name. Every entry requires gradients.
    fn trainable_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params().iter().map(|p| (p.name.as_str(), &p.tensor)).collect()
    }
}

impl Clone for Box<dyn PeftModule> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a fresh module for `technique`.
pub fn build(technique: Technique, hp: &PeftHyperparams, base: &BaseConfig) -> Result<Box<dyn PeftModule>, PeftError> {
    base.validate()?;
    Ok(match technique {
        Technique::PromptTuning => Box::new(PromptTuning::build(hp, base)?),
        Technique::PrefixTuning => Box::new(PrefixTuning::build(hp, base)?),
        Technique::LoRA => Box::new(Lora::build(hp, base)?),
        Technique::Adapters => Box::new(Adapter::build(hp, base)?),
        Technique::TinyAttention => Box::new(TinyAttention::build(hp, base)?),
        Technique::Compacters => Box::new(Compacter::build(hp, base)?),
        Technique::IA3 => Box::new(Ia3::build(hp, base)?),
    })
}

/// Builds the module a checkpoint describes, before its tensors are loaded.
pub fn build_variant(
    technique: Technique,
    variant: &str,
    hp: &PeftHyperparams,
    base: &BaseConfig,
) -> Result<Box<dyn PeftModule>, PeftError> {
    match (technique, variant) {
        (_, "full") => build(technique, hp, base),
        (Technique::PrefixTuning, "final") => Ok(Box::new(PrefixTuning::build(hp, base)?.export_final())),
        _ => Err(PeftError::Config(format!(
            "unknown payload variant `{variant}` for {technique}"
        ))),
    }
}

/// `[n, d] -> [batch, n, d]` by stacking copies.
pub(crate) fn tile_batch(tape: &Tape, rows: Var, batch: usize) -> Result<Var, TensorError> {
    let s = tape.shape(rows);
    let one = tape.reshape(rows, &[1, s[0], s[1]])?;
    if batch == 1 {
        Ok(one)
    } else {
        tape.concat(&vec![one; batch], 0)
    }
}

pub(crate) fn unexpected_slot(technique: Technique, slot: SlotId) -> ModelError {
    ModelError::Input(format!("{technique} has no binding at slot {slot}"))
}

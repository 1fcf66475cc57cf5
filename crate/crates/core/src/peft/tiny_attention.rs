use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    positive, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule, Site,
};
use crate::model::{attend, BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, Var};
use crate::typology::*;

/// A single-head attention of width `d_t` over the attention sublayer's
/// output. Each position receives an input-dependent mixture of the other
/// positions, so its effective connections change with the input.
#[derive(Debug, Clone)]
pub struct TinyAttention {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl TinyAttention {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("tiny_dim", hp.tiny_dim)?;
        let (d, dt) = (base.model_dim, hp.tiny_dim);
        let layers = hp.insertion_layers(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        let bound = 1.0 / (d as f64).sqrt();
        for &l in &layers {
            for m in ["query", "key", "value"] {
                params.push(
                    format!("layer{l}.{m}"),
                    Site::Layer(l),
                    Tensor::uniform(&[d, dt], bound, &mut rng),
                );
            }
            params.push(format!("layer{l}.out"), Site::Layer(l), Tensor::zeros(&[dt, d]));
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            params,
        })
    }

    /// Attention of one sequence `h: [T, d_m]`; returns `(output [T, d_m], weights [T, T])`.
    fn attend_one(&self, tape: &Tape, layer: usize, h: Var) -> Result<(Var, Var), ModelError> {
        let p = |s: &str| self.params.bind(tape, &format!("layer{layer}.{s}"));
        let q = tape.matmul(h, p("query"))?;
        let k = tape.matmul(h, p("key"))?;
        let v = tape.matmul(h, p("value"))?;
        let (ctx, probs) = attend(tape, q, k, v, self.base.causal)?;
        Ok((tape.matmul(ctx, p("out"))?, probs))
    }

    /// Mixture weights `[T, T]` the module at `layer` assigns for one
    /// sequence of hidden states `[T, d_m]`.
    pub fn mixture_weights(&self, layer: usize, hidden: &Tensor) -> Result<Tensor, PeftError> {
        if !self.layers.contains(&layer) {
            return Err(PeftError::Config(format!("no tiny-attention module at layer {layer}")));
        }
        if hidden.rank() != 2 || hidden.shape()[1] != self.base.model_dim {
            return Err(PeftError::Config(format!(
                "hidden states must be [T, {}], got {:?}",
                self.base.model_dim,
                hidden.shape()
            )));
        }
        let tape = Tape::new();
        let h = tape.constant(hidden.detached());
        let (_, probs) = self.attend_one(&tape, layer, h)?;
        Ok(tape.value(probs))
    }
}

impl PeftModule for TinyAttention {
    fn technique(&self) -> Technique {
        Technique::TinyAttention
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::TinyAttention.label().into(),
            intra_connectivity: IntraConnectivity::DenseSelfAttention,
            inter_connectivity: InterConnectivity::Dynamic,
            parameters_adapted: ParametersAdapted::Addition,
            parameter_sharing: ParameterSharing::None,
            input_type: InputType::Hidden,
            insertion_form: InsertionForm::Sequential,
            insertions: Insertions::AllLayers,
            integration_form: BTreeSet::from([IntegrationKind::DirectAddition]),
            workspace: BTreeSet::from([Workspace::AttentionLayer]),
        }
    }

    fn bindings(&self) -> Vec<Binding> {
        self.layers
            .iter()
            .map(|&l| Binding {
                slot: SlotId::PostAttention(l),
                form: IntegrationForm::DirectAddition,
            })
            .collect()
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn hyperparams(&self) -> &PeftHyperparams {
        &self.hp
    }

    fn base_config(&self) -> &BaseConfig {
        &self.base
    }

    fn apply(&self, tape: &Tape, slot: SlotId, value: SlotValue) -> Result<SlotValue, ModelError> {
        match (slot, value) {
            (SlotId::PostAttention(l), SlotValue::Hidden(h)) if self.layers.contains(&l) => {
                let s = tape.shape(h);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut outs = Vec::with_capacity(b);
                for i in 0..b {
                    let hi = tape.reshape(tape.slice(h, 0, i, i + 1)?, &[t, d])?;
                    let (oi, _) = self.attend_one(tape, l, hi)?;
                    outs.push(tape.reshape(oi, &[1, t, d])?);
                }
                let delta = if b == 1 { outs[0] } else { tape.concat(&outs, 0)? };
                Ok(SlotValue::Hidden(
                    IntegrationForm::DirectAddition.integrate(tape, h, delta)?,
                ))
            }
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

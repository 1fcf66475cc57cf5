use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    positive, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule, Site,
};
use crate::model::{linear, BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, Var};
use crate::typology::*;

/// Which sublayer an adapter stack follows.
pub(crate) fn sublayer(slot: SlotId) -> Option<(&'static str, usize)> {
    match slot {
        SlotId::PostAttention(l) => Some(("attn", l)),
        SlotId::PostFfn(l) => Some(("ffn", l)),
        _ => None,
    }
}

pub(crate) fn sequential_bindings(layers: &[usize]) -> Vec<Binding> {
    layers
        .iter()
        .flat_map(|&l| {
            [SlotId::PostAttention(l), SlotId::PostFfn(l)].map(|slot| Binding {
                slot,
                form: IntegrationForm::DirectAddition,
            })
        })
        .collect()
}

/// `relu(h·W_down [+ b_down])·W_up [+ b_up]`
pub(crate) fn bottleneck(
    tape: &Tape,
    h: Var,
    down: Var,
    up: Var,
    biases: Option<(Var, Var)>,
) -> Result<Var, ModelError> {
    let mut z = linear(tape, h, down)?;
    if let Some((b, _)) = biases {
        z = tape.shift_last(z, b)?;
    }
    let mut out = linear(tape, tape.relu(z), up)?;
    if let Some((_, b)) = biases {
        out = tape.shift_last(out, b)?;
    }
    Ok(out)
}

/// Bottleneck MLPs after the attention and feed-forward sublayers,
/// `h + up(relu(down(h)))`.
#[derive(Debug, Clone)]
pub struct Adapter {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl Adapter {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("bottleneck_dim", hp.bottleneck_dim)?;
        let (d, dh) = (base.model_dim, hp.bottleneck_dim);
        let layers = hp.insertion_layers(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        let bound = 1.0 / (d as f64).sqrt();
        for &l in &layers {
            for sub in ["attn", "ffn"] {
                let site = Site::Layer(l);
                params.push(
                    format!("layer{l}.{sub}.down"),
                    site,
                    Tensor::uniform(&[d, dh], bound, &mut rng),
                );
                params.push(format!("layer{l}.{sub}.up"), site, Tensor::zeros(&[dh, d]));
                if hp.adapter_biases {
                    params.push(format!("layer{l}.{sub}.down_bias"), site, Tensor::zeros(&[dh]));
                    params.push(format!("layer{l}.{sub}.up_bias"), site, Tensor::zeros(&[d]));
                }
            }
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            params,
        })
    }
}

impl PeftModule for Adapter {
    fn technique(&self) -> Technique {
        Technique::Adapters
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::Adapters.label().into(),
            intra_connectivity: IntraConnectivity::DenseNonlinearMlp,
            inter_connectivity: InterConnectivity::FixedDense,
            parameters_adapted: ParametersAdapted::Addition,
            parameter_sharing: ParameterSharing::None,
            input_type: InputType::Hidden,
            insertion_form: InsertionForm::Sequential,
            insertions: Insertions::AllLayers,
            integration_form: BTreeSet::from([IntegrationKind::DirectAddition]),
            workspace: BTreeSet::from([Workspace::AttentionLayer, Workspace::FfnLayer]),
        }
    }

    fn bindings(&self) -> Vec<Binding> {
        sequential_bindings(&self.layers)
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
        match (sublayer(slot), value) {
            (Some((sub, l)), SlotValue::Hidden(h)) if self.layers.contains(&l) => {
                let p = |s: &str| self.params.bind(tape, &format!("layer{l}.{sub}.{s}"));
                let biases = self.hp.adapter_biases.then(|| (p("down_bias"), p("up_bias")));
                let delta = bottleneck(tape, h, p("down"), p("up"), biases)?;
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

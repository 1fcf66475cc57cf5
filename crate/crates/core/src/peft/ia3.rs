use std::collections::BTreeSet;

use super::{unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule, Site};
use crate::model::{BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor};
use crate::typology::*;

/// Learned vectors rescaling attention keys, attention values and the
/// feed-forward intermediate activations. All start at one.
#[derive(Debug, Clone)]
pub struct Ia3 {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl Ia3 {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        let layers = hp.insertion_layers(base)?;
        let (d, f) = (base.model_dim, base.ffn_dim);
        let mut params = ParamSet::new();
        for &l in &layers {
            params.push(format!("layer{l}.key"), Site::Layer(l), Tensor::ones(&[d]));
            params.push(format!("layer{l}.value"), Site::Layer(l), Tensor::ones(&[d]));
            params.push(format!("layer{l}.ffn"), Site::Layer(l), Tensor::ones(&[f]));
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            params,
        })
    }
}

impl PeftModule for Ia3 {
    fn technique(&self) -> Technique {
        Technique::IA3
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::IA3.label().into(),
            intra_connectivity: IntraConnectivity::NoneParameterVector,
            inter_connectivity: InterConnectivity::FixedDense,
            parameters_adapted: ParametersAdapted::Addition,
            parameter_sharing: ParameterSharing::None,
            input_type: InputType::Weights,
            insertion_form: InsertionForm::Sequential,
            insertions: Insertions::AllLayers,
            integration_form: BTreeSet::from([IntegrationKind::Rescaling]),
            workspace: BTreeSet::from([Workspace::AttentionKeysValues, Workspace::FfnIntermediate]),
        }
    }

    fn bindings(&self) -> Vec<Binding> {
        self.layers
            .iter()
            .flat_map(|&l| {
                [SlotId::AttnKeysValues(l), SlotId::FfnIntermediate(l)].map(|slot| Binding {
                    slot,
                    form: IntegrationForm::Rescaling,
                })
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
        let form = IntegrationForm::Rescaling;
        match (slot, value) {
            (SlotId::AttnKeysValues(l), SlotValue::KeysValues { keys, values }) if self.layers.contains(&l) => {
                let lk = self.params.bind(tape, &format!("layer{l}.key"));
                let lv = self.params.bind(tape, &format!("layer{l}.value"));
                Ok(SlotValue::KeysValues {
                    keys: form.integrate(tape, keys, lk)?,
                    values: form.integrate(tape, values, lv)?,
                })
            }
            (SlotId::FfnIntermediate(l), SlotValue::Hidden(h)) if self.layers.contains(&l) => {
                let lf = self.params.bind(tape, &format!("layer{l}.ffn"));
                Ok(SlotValue::Hidden(form.integrate(tape, h, lf)?))
            }
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

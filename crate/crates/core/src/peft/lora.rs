use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    positive, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule, Site,
};
use crate::model::{linear, BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, Var};
use crate::typology::*;

/// Low-rank update of the query and value projections, running in parallel
/// with the frozen weights: `q = x·W_q + λ·(x·A_q·B_q)`, likewise for `v`.
/// `A` starts random and `B` at zero.
#[derive(Debug, Clone)]
pub struct Lora {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl Lora {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("lora_rank", hp.lora_rank)?;
        let (d, r) = (base.model_dim, hp.lora_rank);
        if r > d {
            return Err(PeftError::Config(format!("LoRA rank {r} exceeds model width {d}")));
        }
        if !hp.lora_scale.is_finite() {
            return Err(PeftError::Config("LoRA scale must be finite".into()));
        }
        let layers = hp.insertion_layers(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        let bound = 1.0 / (d as f64).sqrt();
        for &l in &layers {
            for proj in ["query", "value"] {
                params.push(
                    format!("layer{l}.{proj}.down"),
                    Site::Layer(l),
                    Tensor::uniform(&[d, r], bound, &mut rng),
                );
                params.push(format!("layer{l}.{proj}.up"), Site::Layer(l), Tensor::zeros(&[r, d]));
            }
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            params,
        })
    }

    fn form(&self) -> IntegrationForm {
        IntegrationForm::ScaledAddition(self.hp.lora_scale)
    }

    fn update(&self, tape: &Tape, layer: usize, proj: &str, input: Var, h: Var) -> Result<Var, ModelError> {
        let down = self.params.bind(tape, &format!("layer{layer}.{proj}.down"));
        let up = self.params.bind(tape, &format!("layer{layer}.{proj}.up"));
        let delta = linear(tape, linear(tape, input, down)?, up)?;
        Ok(self.form().integrate(tape, h, delta)?)
    }
}

impl PeftModule for Lora {
    fn technique(&self) -> Technique {
        Technique::LoRA
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::LoRA.label().into(),
            intra_connectivity: IntraConnectivity::DenseLinearMlp,
            inter_connectivity: InterConnectivity::FixedDense,
            parameters_adapted: ParametersAdapted::Reparameterisation,
            parameter_sharing: ParameterSharing::None,
            input_type: InputType::Data,
            insertion_form: InsertionForm::Parallel,
            insertions: Insertions::AllLayers,
            integration_form: BTreeSet::from([IntegrationKind::ScaledAddition]),
            workspace: BTreeSet::from([Workspace::AttentionQueriesValues]),
        }
    }

    fn bindings(&self) -> Vec<Binding> {
        self.layers
            .iter()
            .map(|&l| Binding {
                slot: SlotId::AttnQueryValueWeights(l),
                form: self.form(),
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
            (
                SlotId::AttnQueryValueWeights(l),
                SlotValue::QueryValue {
                    input,
                    w_query,
                    w_value,
                    query,
                    value,
                },
            ) if self.layers.contains(&l) => Ok(SlotValue::QueryValue {
                input,
                w_query,
                w_value,
                query: self.update(tape, l, "query", input, query)?,
                value: self.update(tape, l, "value", input, value)?,
            }),
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

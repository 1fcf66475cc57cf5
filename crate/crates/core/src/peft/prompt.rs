use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    positive, tile_batch, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule,
    Site,
};
use crate::model::{BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor};
use crate::typology::*;

/// Learned virtual-token embeddings prepended to the input embeddings.
#[derive(Debug, Clone)]
pub struct PromptTuning {
    hp: PeftHyperparams,
    base: BaseConfig,
    params: ParamSet,
}

impl PromptTuning {
    pub const PROMPT: &'static str = "prompt";

    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("n_virtual_tokens", hp.n_virtual_tokens)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        params.push(
            Self::PROMPT,
            Site::Embedding,
            Tensor::uniform(&[hp.n_virtual_tokens, base.model_dim], 1.0, &mut rng),
        );
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            params,
        })
    }
}

impl PeftModule for PromptTuning {
    fn technique(&self) -> Technique {
        Technique::PromptTuning
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::PromptTuning.label().into(),
            intra_connectivity: IntraConnectivity::DenseEmbedding,
            inter_connectivity: InterConnectivity::FixedDense,
            parameters_adapted: ParametersAdapted::Addition,
            parameter_sharing: ParameterSharing::None,
            input_type: InputType::Weights,
            insertion_form: InsertionForm::Parallel,
            insertions: Insertions::OneLayer,
            integration_form: BTreeSet::from([IntegrationKind::Concatenation]),
            workspace: BTreeSet::from([Workspace::EmbeddingLayer]),
        }
    }

    fn bindings(&self) -> Vec<Binding> {
        vec![Binding {
            slot: SlotId::EmbeddingOutput,
            form: IntegrationForm::Concatenation,
        }]
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
            (SlotId::EmbeddingOutput, SlotValue::Hidden(h)) => {
                let batch = tape.shape(h)[0];
                let prompt = tile_batch(tape, self.params.bind(tape, Self::PROMPT), batch)?;
                Ok(SlotValue::Hidden(
                    IntegrationForm::Concatenation.integrate(tape, h, prompt)?,
                ))
            }
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

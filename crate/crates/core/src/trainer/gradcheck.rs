use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, make_task, Example, TaskSpec, TrainError};
use crate::model::{BaseConfig, BaseModel};
use crate::peft::{self, ComposedModel, ParamSet, PeftHyperparams, PeftModule};
use crate::tensor::finite_diff_check;
use crate::typology::Technique;

/// One layer, width 8, two heads, vocabulary 8.
pub fn mini_config() -> BaseConfig {
    BaseConfig::new(1, 8, 2, 8)
}

/// Overwrites every module tensor with uniform values in `±bound`, so that
/// zero-initialized factors do not hide gradient paths.
pub fn randomize_params(module: &mut dyn PeftModule, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in module.params_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-bound..bound);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub technique: Technique,
    /// Worst relative error per trainable tensor.
    pub errors: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the batch loss against central differences
/// for every tensor of the attached module.
pub fn gradcheck_module(model: &ComposedModel, batch: &[Example], eps: f64) -> Result<Vec<(String, f64)>, TrainError> {
    let module = model
        .module()
        .ok_or_else(|| TrainError::Config("no PEFT module attached".into()))?;
    let refs: Vec<&Example> = batch.iter().collect();
    module
        .params()
        .iter()
        .map(|p| {
            let key = ParamSet::tape_key(&p.name);
            let err = finite_diff_check(
                |tape, x| {
                    tape.bind_param(&key, x);
                    batch_loss(tape, model, &refs)
                },
                &p.tensor,
                eps,
            )?;
            Ok((p.name.clone(), err))
        })
        .collect()
}

/// Gradient check of one technique on the mini config with sequence
/// length 4, small module sizes and randomized module tensors.
pub fn gradcheck_technique(technique: Technique, seed: u64) -> Result<GradcheckReport, TrainError> {
    let cfg = mini_config();
    let base = Arc::new(BaseModel::build(cfg.clone(), seed).map_err(peft::PeftError::from)?);
    let hp = PeftHyperparams {
        n_virtual_tokens: 2,
        bottleneck_dim: 2,
        lora_rank: 2,
        kron_order: 2,
        tiny_dim: 2,
        seed,
        ..Default::default()
    };
    let mut module = peft::build(technique, &hp, &cfg)?;
    randomize_params(module.as_mut(), seed ^ 0x5eed, 0.5);
    let model = peft::attach(base, module)?;
    let data = make_task(&TaskSpec::copy(cfg.vocab_size, 4, 2, seed))?;
    Ok(GradcheckReport {
        technique,
        errors: gradcheck_module(&model, &data, 1e-5)?,
    })
}

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adapter::{bottleneck, sequential_bindings, sublayer};
use super::{
    positive, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule, Site,
};
use crate::model::{BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::typology::*;

/// `Σ_i A_i ⊗ B_i` for stacked factors `a: [N, p, q]`, `b: [N, r, s]`.
pub fn kron_sum(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(a.detached()), tape.constant(b.detached()));
    Ok(tape.value(kron_sum_on(&tape, a, b)?))
}

fn kron_sum_on(tape: &Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 3 || sb.len() != 3 {
        return Err(TensorError::Rank {
            op: "kron_sum",
            expected: 3,
            got: if sa.len() != 3 { sa } else { sb },
        });
    }
    if sa[0] != sb[0] {
        return Err(TensorError::Dimension {
            op: "kron_sum",
            lhs: sa,
            rhs: sb,
        });
    }
    let mut acc: Option<Var> = None;
    for i in 0..sa[0] {
        let ai = tape.reshape(tape.slice(a, 0, i, i + 1)?, &[sa[1], sa[2]])?;
        let bi = tape.reshape(tape.slice(b, 0, i, i + 1)?, &[sb[1], sb[2]])?;
        let term = tape.kron(ai, bi)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok(acc.expect("at least one Kronecker term"))
}

/// Adapter whose projections are Kronecker sums `W = Σ_i A_i ⊗ B_i`.
/// Within each compacter the `A_i` are shared by the down and up
/// projections; only the `B_i` are projection-specific. The weights are
/// rebuilt from the factors on every forward pass.
#[derive(Debug, Clone)]
pub struct Compacter {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl Compacter {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("bottleneck_dim", hp.bottleneck_dim)?;
        positive("kron_order", hp.kron_order)?;
        let (d, dh, n) = (base.model_dim, hp.bottleneck_dim, hp.kron_order);
        if d % n != 0 || dh % n != 0 {
            return Err(PeftError::Config(format!(
                "Kronecker order {n} must divide both the model width {d} and the bottleneck {dh}"
            )));
        }
        let layers = hp.insertion_layers(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        for &l in &layers {
            for sub in ["attn", "ffn"] {
                let site = Site::Layer(l);
                params.push(
                    format!("layer{l}.{sub}.shared"),
                    site,
                    Tensor::uniform(&[n, n, n], 1.0 / (n as f64).sqrt(), &mut rng),
                );
                params.push(
                    format!("layer{l}.{sub}.down"),
                    site,
                    Tensor::uniform(&[n, d / n, dh / n], 1.0 / (d as f64).sqrt(), &mut rng),
                );
                params.push(format!("layer{l}.{sub}.up"), site, Tensor::zeros(&[n, dh / n, d / n]));
            }
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            params,
        })
    }

    fn factor_name(layer: usize, sub: &str, part: &str) -> Result<String, PeftError> {
        if !matches!(sub, "attn" | "ffn") {
            return Err(PeftError::Config(format!("unknown sublayer `{sub}`; use attn or ffn")));
        }
        Ok(format!("layer{layer}.{sub}.{part}"))
    }

    /// Materialized `(down [d_m, d_h], up [d_h, d_m])` for one compacter.
    pub fn materialized(&self, layer: usize, sub: &str) -> Result<(Tensor, Tensor), PeftError> {
        let get = |part| -> Result<&Tensor, PeftError> {
            let name = Self::factor_name(layer, sub, part)?;
            self.params
                .try_get(&name)
                .ok_or_else(|| PeftError::Config(format!("no compacter at layer {layer}")))
        };
        let a = get("shared")?;
        Ok((kron_sum(a, get("down")?)?, kron_sum(a, get("up")?)?))
    }
}

impl PeftModule for Compacter {
    fn technique(&self) -> Technique {
        Technique::Compacters
    }

    fn descriptor(&self) -> PeftDescriptor {
        PeftDescriptor {
            technique: Technique::Compacters.label().into(),
            intra_connectivity: IntraConnectivity::DenseNonlinearMlp,
            inter_connectivity: InterConnectivity::FixedDense,
            parameters_adapted: ParametersAdapted::Addition,
            parameter_sharing: ParameterSharing::Shared,
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
                let a = p("shared");
                let down = kron_sum_on(tape, a, p("down"))?;
                let up = kron_sum_on(tape, a, p("up"))?;
                let delta = bottleneck(tape, h, down, up, None)?;
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

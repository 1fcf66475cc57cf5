use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    positive, tile_batch, unexpected_slot, Binding, IntegrationForm, ParamSet, PeftError, PeftHyperparams, PeftModule,
    PrefixActivation, Site,
};
use crate::model::{BaseConfig, ModelError, SlotId, SlotValue};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::typology::*;

const EMBED_TOKENS: &str = "embed_tokens";

fn descriptor() -> PeftDescriptor {
    PeftDescriptor {
        technique: Technique::PrefixTuning.label().into(),
        intra_connectivity: IntraConnectivity::DenseNonlinearMlp,
        inter_connectivity: InterConnectivity::FixedDense,
        parameters_adapted: ParametersAdapted::Addition,
        parameter_sharing: ParameterSharing::None,
        input_type: InputType::Weights,
        insertion_form: InsertionForm::Parallel,
        insertions: Insertions::AllLayers,
        // Concatenated prefixes act as a gated addition inside attention.
        integration_form: BTreeSet::from([IntegrationKind::GatedAddition]),
        workspace: BTreeSet::from([Workspace::EmbeddingLayer, Workspace::AttentionKeysValues]),
    }
}

fn bindings(layers: &[usize]) -> Vec<Binding> {
    let mut out = vec![Binding {
        slot: SlotId::EmbeddingOutput,
        form: IntegrationForm::Concatenation,
    }];
    out.extend(layers.iter().map(|&l| Binding {
        slot: SlotId::AttnKeysValues(l),
        form: IntegrationForm::Concatenation,
    }));
    out
}

fn prepend_rows(tape: &Tape, h: Var, rows: Var) -> Result<Var, TensorError> {
    let batch = tape.shape(h)[0];
    let tiled = tile_batch(tape, rows, batch)?;
    IntegrationForm::Concatenation.integrate(tape, h, tiled)
}

/// Per-layer prefixes produced by a reparameterization network
/// `E → linear → activation → linear`, giving `n` key rows and `n` value
/// rows that are prepended to that layer's attention keys and values.
/// A separate set of `n` virtual embeddings is prepended at the embedding
/// layer.
#[derive(Debug, Clone)]
pub struct PrefixTuning {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    prefix_dim: usize,
    params: ParamSet,
}

impl PrefixTuning {
    pub fn build(hp: &PeftHyperparams, base: &BaseConfig) -> Result<Self, PeftError> {
        positive("n_virtual_tokens", hp.n_virtual_tokens)?;
        let d = base.model_dim;
        let prefix_dim = hp.prefix_dim.unwrap_or(d);
        if prefix_dim != d {
            return Err(PeftError::Config(format!(
                "prefix key/value width {prefix_dim} must equal the model width {d}: prefixes are concatenated to full-width keys and values"
            )));
        }
        let layers = hp.insertion_layers(base)?;
        let n = hp.n_virtual_tokens;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut params = ParamSet::new();
        params.push(EMBED_TOKENS, Site::Embedding, Tensor::uniform(&[n, d], 1.0, &mut rng));
        let bound = 1.0 / (d as f64).sqrt();
        for &l in &layers {
            params.push(
                format!("layer{l}.embed"),
                Site::Layer(l),
                Tensor::uniform(&[n, d], 1.0, &mut rng),
            );
            params.push(
                format!("layer{l}.w1"),
                Site::Layer(l),
                Tensor::uniform(&[d, d], bound, &mut rng),
            );
            params.push(
                format!("layer{l}.w2"),
                Site::Layer(l),
                Tensor::uniform(&[d, 2 * prefix_dim], bound, &mut rng),
            );
        }
        Ok(Self {
            hp: hp.clone(),
            base: base.clone(),
            layers,
            prefix_dim,
            params,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Prefix keys and values `[n, d_h]` for one layer, recorded on `tape`.
    pub fn prefix_kv(&self, tape: &Tape, layer: usize) -> Result<(Var, Var), TensorError> {
        let e = self.params.bind(tape, &format!("layer{layer}.embed"));
        let w1 = self.params.bind(tape, &format!("layer{layer}.w1"));
        let w2 = self.params.bind(tape, &format!("layer{layer}.w2"));
        let h = tape.matmul(e, w1)?;
        let h = match self.hp.prefix_activation {
            PrefixActivation::Softmax => tape.softmax(h)?,
            PrefixActivation::Tanh => tape.tanh(h),
        };
        let out = tape.matmul(h, w2)?;
        let dh = self.prefix_dim;
        Ok((tape.slice(out, 1, 0, dh)?, tape.slice(out, 1, dh, 2 * dh)?))
    }

    /// Evaluates the reparameterization network once and keeps only its
    /// outputs; the network itself is discarded.
    pub fn export_final(&self) -> PrefixExport {
        let tape = Tape::new();
        let mut params = ParamSet::new();
        params.push(EMBED_TOKENS, Site::Embedding, self.params.get(EMBED_TOKENS).detached());
        for &l in &self.layers {
            let (k, v) = self
                .prefix_kv(&tape, l)
                .expect("prefix network shapes are fixed at build");
            params.push(format!("layer{l}.keys"), Site::Layer(l), tape.value(k));
            params.push(format!("layer{l}.values"), Site::Layer(l), tape.value(v));
        }
        PrefixExport {
            hp: self.hp.clone(),
            base: self.base.clone(),
            layers: self.layers.clone(),
            params,
        }
    }
}

impl PeftModule for PrefixTuning {
    fn exported(&self) -> Box<dyn PeftModule> {
        Box::new(self.export_final())
    }

    fn technique(&self) -> Technique {
        Technique::PrefixTuning
    }

    fn descriptor(&self) -> PeftDescriptor {
        descriptor()
    }

    fn bindings(&self) -> Vec<Binding> {
        bindings(&self.layers)
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
                let rows = self.params.bind(tape, EMBED_TOKENS);
                Ok(SlotValue::Hidden(prepend_rows(tape, h, rows)?))
            }
            (SlotId::AttnKeysValues(l), SlotValue::KeysValues { keys, values }) if self.layers.contains(&l) => {
                let (pk, pv) = self.prefix_kv(tape, l)?;
                Ok(SlotValue::KeysValues {
                    keys: prepend_rows(tape, keys, pk)?,
                    values: prepend_rows(tape, values, pv)?,
                })
            }
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

/// Prefix tuning reduced to its final per-layer key/value rows.
#[derive(Debug, Clone)]
pub struct PrefixExport {
    hp: PeftHyperparams,
    base: BaseConfig,
    layers: Vec<usize>,
    params: ParamSet,
}

impl PrefixExport {
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }
}

impl PeftModule for PrefixExport {
    fn technique(&self) -> Technique {
        Technique::PrefixTuning
    }

    fn descriptor(&self) -> PeftDescriptor {
        descriptor()
    }

    fn bindings(&self) -> Vec<Binding> {
        bindings(&self.layers)
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

    fn variant(&self) -> &'static str {
        "final"
    }

    fn apply(&self, tape: &Tape, slot: SlotId, value: SlotValue) -> Result<SlotValue, ModelError> {
        match (slot, value) {
            (SlotId::EmbeddingOutput, SlotValue::Hidden(h)) => {
                let rows = self.params.bind(tape, EMBED_TOKENS);
                Ok(SlotValue::Hidden(prepend_rows(tape, h, rows)?))
            }
            (SlotId::AttnKeysValues(l), SlotValue::KeysValues { keys, values }) if self.layers.contains(&l) => {
                let pk = self.params.bind(tape, &format!("layer{l}.keys"));
                let pv = self.params.bind(tape, &format!("layer{l}.values"));
                Ok(SlotValue::KeysValues {
                    keys: prepend_rows(tape, keys, pk)?,
                    values: prepend_rows(tape, values, pv)?,
                })
            }
            _ => Err(unexpected_slot(self.technique(), slot)),
        }
    }

    fn clone_box(&self) -> Box<dyn PeftModule> {
        Box::new(self.clone())
    }
}

/// Softmax mass each query row puts on the first `n_prefix` key columns.
pub fn prefix_mass(probs: &Tensor, n_prefix: usize) -> Vec<f64> {
    let k = probs.shape()[probs.rank() - 1];
    probs.data().chunks(k).map(|row| row[..n_prefix].iter().sum()).collect()
}

/// Attention of `q: [T, d]` over prefixed keys and values, computed two ways:
/// directly over `[P_k; K]`, `[P_v; V]`, and as the gated mixture
/// `(1 − λ)·Attn(q, K, V) + λ·Attn(q, P_k, P_v)` with `λ` the prefix mass.
/// Returns `(concatenated, gated, λ)`.
pub fn prefix_attention_forms(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    pk: &Tensor,
    pv: &Tensor,
    causal: bool,
) -> Result<(Tensor, Tensor, Vec<f64>), PeftError> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.detached());
    let (q, k, v, pk, pv) = (c(q), c(k), c(v), c(pk), c(pv));
    let n = tape.shape(pk)[0];
    let keys = tape.concat(&[pk, k], 0)?;
    let values = tape.concat(&[pv, v], 0)?;
    let (joint, probs) = crate::model::attend(&tape, q, keys, values, causal)?;
    let lambda = prefix_mass(&tape.value_ref(probs), n);
    let (own, _) = crate::model::attend(&tape, q, k, v, causal)?;
    // Every query sees every prefix position.
    let (pre, _) = crate::model::attend(&tape, q, pk, pv, false)?;
    let (own, pre) = (tape.value(own), tape.value(pre));
    let d = own.shape()[1];
    let gated = Tensor::from_fn(own.shape(), |i| {
        let l = lambda[i / d];
        (1.0 - l) * own.data()[i] + l * pre.data()[i]
    });
    Ok((tape.value(joint), gated, lambda))
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BaseConfig, HookMap, ModelError, NormPlacement, SlotId, SlotValue};
use crate::hash::Fnv64;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub w_ffn_in: Tensor,
    pub w_ffn_out: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Frozen decoder-style transformer used as the base for every technique.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    config: BaseConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub unembedding: Tensor,
}

/// Values captured in one layer, after hook application.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the layer.
    pub residual_in: Tensor,
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    /// Softmax weights, indexed `[batch][head]`, each `[q_len, k_len]`.
    pub attention_probs: Vec<Vec<Tensor>>,
    /// Head outputs concatenated, before the output projection.
    pub attention_context: Tensor,
    /// Attention sublayer output (the `PostAttention` slot value).
    pub attention_out: Tensor,
    pub ffn_intermediate: Tensor,
    /// FFN sublayer output (the `PostFfn` slot value).
    pub ffn_out: Tensor,
    pub residual_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Embedding slot value after its hook, before positional terms.
    pub embedding: Tensor,
    pub layers: Vec<LayerTrace>,
    /// Residual stream after the last layer (before the final norm).
    pub final_hidden: Tensor,
}

impl ForwardTrace {
    /// Residual-stream value entering `layer`.
    pub fn residual_flow_view(&self, layer: usize) -> Result<&Tensor, ModelError> {
        self.layers.get(layer).map(|l| &l.residual_in).ok_or(ModelError::Index {
            layer,
            num_layers: self.layers.len(),
        })
    }
}

/// Free function form of [`ForwardTrace::residual_flow_view`].
pub fn residual_flow_view(trace: &ForwardTrace, layer: usize) -> Result<&Tensor, ModelError> {
    trace.residual_flow_view(layer)
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl BaseModel {
    /// Token embeddings are uniform in `±1`; position embeddings and every
    /// projection are uniform in `±1/sqrt(fan_in)` (fan-in `d` for
    /// positions). The output projection starts as the transposed token
    /// embedding, as with tied input/output embeddings, so the untrained
    /// base already leans towards reproducing its input. Layer-norm gains
    /// start at one and biases at zero. Nothing requires gradients.
    pub fn build(config: BaseConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let token_embedding = Tensor::uniform(&[config.vocab_size, d], 1.0, &mut rng);
        let position_embedding = Tensor::uniform(&[config.max_seq_len, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_query: uniform_fan_in(&mut rng, d, d),
                w_key: uniform_fan_in(&mut rng, d, d),
                w_value: uniform_fan_in(&mut rng, d, d),
                w_out: uniform_fan_in(&mut rng, d, d),
                w_ffn_in: uniform_fan_in(&mut rng, d, config.ffn_dim),
                w_ffn_out: uniform_fan_in(&mut rng, config.ffn_dim, d),
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let v = config.vocab_size;
        let unembedding = Tensor::from_fn(&[d, v], |i| token_embedding.data()[(i % v) * d + i / v]);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
            unembedding,
        })
    }

    pub fn config(&self) -> &BaseConfig {
        &self.config
    }

    /// All parameters with stable names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("w_query", &p.w_query),
                ("w_key", &p.w_key),
                ("w_value", &p.w_value),
                ("w_out", &p.w_out),
                ("w_ffn_in", &p.w_ffn_in),
                ("w_ffn_out", &p.w_ffn_out),
                ("ln1_gain", &p.ln1_gain),
                ("ln1_bias", &p.ln1_bias),
                ("ln2_gain", &p.ln2_gain),
                ("ln2_bias", &p.ln2_bias),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for p in &mut self.layers {
            out.extend([
                &mut p.w_query,
                &mut p.w_key,
                &mut p.w_value,
                &mut p.w_out,
                &mut p.w_ffn_in,
                &mut p.w_ffn_out,
                &mut p.ln1_gain,
                &mut p.ln1_bias,
                &mut p.ln2_gain,
                &mut p.ln2_bias,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.unembedding]);
        out
    }

    /// Rebuilds a model from named tensors, e.g. after loading a checkpoint.
    pub fn from_named(config: BaseConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut model = BaseModel::build(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != names.len() {
            return Err(ModelError::Config(format!(
                "expected {} base tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in
            model.parameters_mut().into_iter().zip(names).zip(tensors.drain(..))
        {
            if got_name != name || t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "base tensor `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            *slot = t.detached();
        }
        Ok(model)
    }

    /// Number of trainable values (zero: the base is frozen).
    pub fn trainable_parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Digest of every parameter's bit pattern.
    pub fn parameter_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, t) in self.named_parameters() {
            h.write(name.as_bytes());
            h.write_f64s(t.data());
        }
        h.finish()
    }

    fn param(&self, tape: &Tape, name: &str, t: &Tensor) -> Var {
        tape.param(&format!("base.{name}"), t)
    }

    /// Forward pass without hooks; returns logits `[batch, seq, vocab]`.
    pub fn forward(&self, tape: &Tape, tokens: &[Vec<usize>]) -> Result<Var, ModelError> {
        Ok(forward_with_hooks(self, tape, tokens, &HookMap::new())?.0)
    }
}

fn validate_tokens(cfg: &BaseConfig, tokens: &[Vec<usize>]) -> Result<(usize, usize), ModelError> {
    let batch = tokens.len();
    let seq = tokens.first().map(Vec::len).unwrap_or(0);
    if batch == 0 || seq == 0 {
        return Err(ModelError::Input("empty token batch".into()));
    }
    if tokens.iter().any(|r| r.len() != seq) {
        return Err(ModelError::Input("ragged token batch".into()));
    }
    if seq > cfg.max_seq_len {
        return Err(ModelError::Input(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Input(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok((batch, seq))
}

/// `x · w` for `x: [batch, seq, d_in]`, `w: [d_in, d_out]`.
pub fn linear(tape: &Tape, x: Var, w: Var) -> Result<Var, ModelError> {
    let s = tape.shape(x);
    let (b, t, d_in) = (s[0], s[1], s[2]);
    let d_out = tape.shape(w)[1];
    let flat = tape.reshape(x, &[b * t, d_in])?;
    let y = tape.matmul(flat, w)?;
    Ok(tape.reshape(y, &[b, t, d_out])?)
}

fn norm(tape: &Tape, x: Var, gain: Var, bias: Var) -> Result<Var, ModelError> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let n = tape.scale_last(n, gain)?;
    Ok(tape.shift_last(n, bias)?)
}

/// Additive mask for `q_len` queries over `k_len` keys. The first
/// `k_len - q_len` keys (prefix positions) are visible to every query; the
/// remainder follow the causal rule.
pub fn causal_mask(q_len: usize, k_len: usize) -> Tensor {
    let offset = k_len - q_len;
    Tensor::from_fn(&[q_len, k_len], |idx| {
        let (i, j) = (idx / k_len, idx % k_len);
        if j <= i + offset {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Scaled dot-product attention of `q: [tq, dh]` over `k, v: [tk, dh]`.
/// Returns the attended output and the softmax weights.
pub fn attend(tape: &Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<(Var, Var), ModelError> {
    let (tq, dh) = {
        let s = tape.shape(q);
        (s[0], s[1])
    };
    let tk = tape.shape(k)[0];
    if causal && tk < tq {
        return Err(ModelError::Input(format!(
            "causal attention needs at least as many keys ({tk}) as queries ({tq})"
        )));
    }
    let scores = tape.matmul(q, tape.transpose(k)?)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if causal {
        scores = tape.add(scores, tape.constant(causal_mask(tq, tk)))?;
    }
    let probs = tape.softmax(scores)?;
    Ok((tape.matmul(probs, v)?, probs))
}

fn check_same(slot: SlotId, before: &[usize], after: &[usize]) -> Result<(), ModelError> {
    if before != after {
        return Err(ModelError::SlotContract {
            slot,
            expected: format!("{before:?}"),
            got: after.to_vec(),
        });
    }
    Ok(())
}

fn expect_hidden(slot: SlotId, v: SlotValue) -> Result<Var, ModelError> {
    match v {
        SlotValue::Hidden(h) => Ok(h),
        other => Err(ModelError::SlotKind {
            slot,
            expected: "hidden",
            got: other.kind(),
        }),
    }
}

/// Runs the base model, consulting `hooks` at every slot. With an empty map
/// the result is the plain frozen model. The trace records values after
/// each hook ran.
pub fn forward_with_hooks(
    model: &BaseModel,
    tape: &Tape,
    tokens: &[Vec<usize>],
    hooks: &HookMap<'_>,
) -> Result<(Var, ForwardTrace), ModelError> {
    let cfg = &model.config;
    for slot in hooks.slots() {
        slot.validate(cfg.num_layers)?;
    }
    let (batch, seq) = validate_tokens(cfg, tokens)?;
    let d = cfg.model_dim;

    let tok_table = model.param(tape, "token_embedding", &model.token_embedding);
    let flat_ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let emb = tape.gather_rows(tok_table, &flat_ids)?;
    let emb = tape.reshape(emb, &[batch, seq, d])?;

    let slot = SlotId::EmbeddingOutput;
    let emb = expect_hidden(slot, hooks.apply(tape, slot, SlotValue::Hidden(emb))?)?;
    let emb_shape = tape.shape(emb);
    let full_len = match emb_shape.as_slice() {
        [b, t, dd] if *b == batch && *dd == d && *t >= seq && *t <= cfg.max_seq_len => *t,
        _ => {
            return Err(ModelError::SlotContract {
                slot,
                expected: format!("[{batch}, T >= {seq} and <= {}, {d}]", cfg.max_seq_len),
                got: emb_shape,
            })
        }
    };

    let pos_table = model.param(tape, "position_embedding", &model.position_embedding);
    let pos = tape.slice(pos_table, 0, 0, full_len)?;
    let pos = tape.reshape(pos, &[1, full_len, d])?;
    let pos = if batch == 1 {
        pos
    } else {
        tape.concat(&vec![pos; batch], 0)?
    };
    let mut x = tape.add(emb, pos)?;

    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let mut layer_traces = Vec::with_capacity(cfg.num_layers);
    for (l, p) in model.layers.iter().enumerate() {
        let name = |s: &str| format!("layer{l}.{s}");
        let residual_in = x;
        let ln1_g = model.param(tape, &name("ln1_gain"), &p.ln1_gain);
        let ln1_b = model.param(tape, &name("ln1_bias"), &p.ln1_bias);
        let ln2_g = model.param(tape, &name("ln2_gain"), &p.ln2_gain);
        let ln2_b = model.param(tape, &name("ln2_bias"), &p.ln2_bias);
        let attn_in = match cfg.norm {
            NormPlacement::Pre => norm(tape, x, ln1_g, ln1_b)?,
            NormPlacement::Post => x,
        };
        let wq = model.param(tape, &name("w_query"), &p.w_query);
        let wk = model.param(tape, &name("w_key"), &p.w_key);
        let wv = model.param(tape, &name("w_value"), &p.w_value);
        let q = linear(tape, attn_in, wq)?;
        let k = linear(tape, attn_in, wk)?;
        let v = linear(tape, attn_in, wv)?;
        let hidden_shape = tape.shape(q);

        let slot = SlotId::AttnQueryValueWeights(l);
        let (q, v) = match hooks.apply(
            tape,
            slot,
            SlotValue::QueryValue {
                input: attn_in,
                w_query: wq,
                w_value: wv,
                query: q,
                value: v,
            },
        )? {
            SlotValue::QueryValue { query, value, .. } => {
                check_same(slot, &hidden_shape, &tape.shape(query))?;
                check_same(slot, &hidden_shape, &tape.shape(value))?;
                (query, value)
            }
            other => {
                return Err(ModelError::SlotKind {
                    slot,
                    expected: "query/value",
                    got: other.kind(),
                })
            }
        };

        let slot = SlotId::AttnKeysValues(l);
        let (k, v) = match hooks.apply(tape, slot, SlotValue::KeysValues { keys: k, values: v })? {
            SlotValue::KeysValues { keys, values } => {
                let (ks, vs) = (tape.shape(keys), tape.shape(values));
                let ok = ks == vs && ks.len() == 3 && ks[0] == batch && ks[2] == d && ks[1] >= full_len;
                if !ok {
                    return Err(ModelError::SlotContract {
                        slot,
                        expected: format!("keys and values both [{batch}, K >= {full_len}, {d}]"),
                        got: if ks.len() == 3 && ks[0] == batch && ks[2] == d && ks[1] >= full_len {
                            vs
                        } else {
                            ks
                        },
                    });
                }
                (keys, values)
            }
            other => {
                return Err(ModelError::SlotKind {
                    slot,
                    expected: "keys/values",
                    got: other.kind(),
                })
            }
        };
        let k_len = tape.shape(k)[1];

        let mut per_batch = Vec::with_capacity(batch);
        let mut probs_trace = Vec::with_capacity(batch);
        for b in 0..batch {
            let take = |t: Var, len: usize| -> Result<Var, ModelError> {
                let s = tape.slice(t, 0, b, b + 1)?;
                Ok(tape.reshape(s, &[len, d])?)
            };
            let (qb, kb, vb) = (take(q, full_len)?, take(k, k_len)?, take(v, k_len)?);
            let mut head_outs = Vec::with_capacity(heads);
            let mut head_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = |t: Var| tape.slice(t, 1, h * dh, (h + 1) * dh);
                let (out, probs) = attend(tape, cols(qb)?, cols(kb)?, cols(vb)?, cfg.causal)?;
                head_outs.push(out);
                head_probs.push(tape.value(probs));
            }
            let merged = if heads == 1 {
                head_outs[0]
            } else {
                tape.concat(&head_outs, 1)?
            };
            per_batch.push(tape.reshape(merged, &[1, full_len, d])?);
            probs_trace.push(head_probs);
        }
        let context = if batch == 1 {
            per_batch[0]
        } else {
            tape.concat(&per_batch, 0)?
        };
        let wo = model.param(tape, &name("w_out"), &p.w_out);
        let attn_out = linear(tape, context, wo)?;
        let slot = SlotId::PostAttention(l);
        let attn_out = expect_hidden(slot, hooks.apply(tape, slot, SlotValue::Hidden(attn_out))?)?;
        check_same(slot, &hidden_shape, &tape.shape(attn_out))?;

        let (x_mid, ffn_in) = match cfg.norm {
            NormPlacement::Pre => {
                let x_mid = tape.add(x, attn_out)?;
                (x_mid, norm(tape, x_mid, ln2_g, ln2_b)?)
            }
            NormPlacement::Post => {
                let x_mid = norm(tape, tape.add(x, attn_out)?, ln1_g, ln1_b)?;
                (x_mid, x_mid)
            }
        };
        let w1 = model.param(tape, &name("w_ffn_in"), &p.w_ffn_in);
        let inter = tape.relu(linear(tape, ffn_in, w1)?);
        let inter_shape = tape.shape(inter);
        let slot = SlotId::FfnIntermediate(l);
        let inter = expect_hidden(slot, hooks.apply(tape, slot, SlotValue::Hidden(inter))?)?;
        check_same(slot, &inter_shape, &tape.shape(inter))?;
        let w2 = model.param(tape, &name("w_ffn_out"), &p.w_ffn_out);
        let ffn_out = linear(tape, inter, w2)?;
        let slot = SlotId::PostFfn(l);
        let ffn_out = expect_hidden(slot, hooks.apply(tape, slot, SlotValue::Hidden(ffn_out))?)?;
        check_same(slot, &hidden_shape, &tape.shape(ffn_out))?;

        x = match cfg.norm {
            NormPlacement::Pre => tape.add(x_mid, ffn_out)?,
            NormPlacement::Post => norm(tape, tape.add(x_mid, ffn_out)?, ln2_g, ln2_b)?,
        };
        layer_traces.push(LayerTrace {
            residual_in: tape.value(residual_in),
            queries: tape.value(q),
            keys: tape.value(k),
            values: tape.value(v),
            attention_probs: probs_trace,
            attention_context: tape.value(context),
            attention_out: tape.value(attn_out),
            ffn_intermediate: tape.value(inter),
            ffn_out: tape.value(ffn_out),
            residual_out: tape.value(x),
        });
    }

    let final_hidden = x;
    let out_in = match cfg.norm {
        NormPlacement::Pre => {
            let g = model.param(tape, "final_gain", &model.final_gain);
            let b = model.param(tape, "final_bias", &model.final_bias);
            norm(tape, x, g, b)?
        }
        NormPlacement::Post => x,
    };
    let w_unembed = model.param(tape, "unembedding", &model.unembedding);
    let logits = linear(tape, out_in, w_unembed)?;
    let trace = ForwardTrace {
        embedding: tape.value(emb),
        layers: layer_traces,
        final_hidden: tape.value(final_hidden),
    };
    Ok((logits, trace))
}

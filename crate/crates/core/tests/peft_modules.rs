use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use peft_ref::model::{forward_with_hooks, BaseConfig, BaseModel, HookMap, SlotId, SlotValue};
use peft_ref::peft::{
    self, attach, kron_sum, prefix_attention_forms, Compacter, ComposedModel, Ia3, PeftError, PeftHyperparams,
    PeftModule, PrefixTuning, Site, TinyAttention,
};
use peft_ref::tensor::{Tape, Tensor};
use peft_ref::typology::{validate_descriptor, Technique};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_base() -> Arc<BaseModel> {
    Arc::new(BaseModel::build(BaseConfig::new(2, 16, 2, 12), 3).unwrap())
}

fn random_tokens(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

fn logits(model: &ComposedModel, tokens: &[Vec<usize>]) -> Tensor {
    let tape = Tape::new();
    let out = model.forward(&tape, tokens).unwrap();
    tape.value(out)
}

fn randomize(module: &mut dyn PeftModule, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in module.params_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
}

fn per_layer_count(module: &dyn PeftModule, layer: usize) -> usize {
    module
        .params()
        .iter()
        .filter(|p| p.site == Site::Layer(layer))
        .map(|p| p.tensor.numel())
        .sum()
}

fn non_layer_count(module: &dyn PeftModule) -> usize {
    module
        .params()
        .iter()
        .filter(|p| p.site == Site::Embedding)
        .map(|p| p.tensor.numel())
        .sum()
}

#[test]
fn zero_initialized_modules_leave_logits_unchanged() {
    let base = small_base();
    let plain = ComposedModel::new(base.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [
        Technique::LoRA,
        Technique::Adapters,
        Technique::TinyAttention,
        Technique::IA3,
        Technique::Compacters,
    ] {
        let m = peft::build(t, &PeftHyperparams::default(), base.config()).unwrap();
        let composed = attach(base.clone(), m).unwrap();
        for _ in 0..5 {
            let toks = random_tokens(&mut rng, 2, 5, 12);
            assert!(logits(&composed, &toks).bit_eq(&logits(&plain, &toks)), "{t}");
        }
    }
}

#[test]
fn table_counts_hold_per_layer() {
    let cfg = BaseConfig::new(2, 16, 2, 12);
    let hp = PeftHyperparams {
        n_virtual_tokens: 8,
        bottleneck_dim: 4,
        lora_rank: 2,
        ..Default::default()
    };
    let count = |t| {
        let m = peft::build(t, &hp, &cfg).unwrap();
        (per_layer_count(m.as_ref(), 0), non_layer_count(m.as_ref()))
    };
    assert_eq!(count(Technique::PromptTuning), (0, 128));
    assert_eq!(count(Technique::LoRA), (128, 0));
    assert_eq!(count(Technique::Adapters), (256, 0));
    assert_eq!(count(Technique::TinyAttention), (64, 0));
    assert_eq!(count(Technique::IA3), (96, 0));
    let (compacter, _) = count(Technique::Compacters);
    assert!(compacter < 256, "{compacter}");

    let hp = PeftHyperparams {
        n_virtual_tokens: 4,
        ..Default::default()
    };
    let prefix = peft::build(Technique::PrefixTuning, &hp, &cfg).unwrap();
    assert_eq!(per_layer_count(prefix.as_ref(), 1), 832);
}

#[test]
fn every_trainable_tensor_requires_grad() {
    let base = small_base();
    for t in Technique::ALL {
        let m = peft::build(t, &PeftHyperparams::default(), base.config()).unwrap();
        assert!(!m.trainable_tensors().is_empty());
        for (name, tensor) in m.trainable_tensors() {
            assert!(tensor.requires_grad(), "{t}: {name}");
        }
    }
}

#[test]
fn descriptors_match_registry() {
    let cfg = BaseConfig::new(1, 8, 2, 8);
    for t in Technique::ALL {
        let m = peft::build(t, &PeftHyperparams::default(), &cfg).unwrap();
        assert_eq!(validate_descriptor(&m.descriptor()).unwrap(), vec![], "{t}");
        let kinds: BTreeSet<_> = m.bindings().iter().map(|b| b.slot.workspace()).collect();
        assert_eq!(kinds, m.descriptor().workspace, "{t}");
    }
}

#[test]
fn prompt_tuning_extends_sequence_and_trains_only_prompt() {
    let base = small_base();
    let hp = PeftHyperparams {
        n_virtual_tokens: 3,
        ..Default::default()
    };
    let m = peft::build(Technique::PromptTuning, &hp, base.config()).unwrap();
    let composed = attach(base.clone(), m).unwrap();
    let tape = Tape::new();
    let toks = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
    let (out, trace) = composed.forward_trace(&tape, &toks).unwrap();
    assert_eq!(tape.shape(out), vec![2, 4, 12]);
    for layer in &trace.layers {
        assert_eq!(layer.keys.shape()[1], 7);
    }
    let loss = tape
        .cross_entropy(tape.reshape(out, &[8, 12]).unwrap(), &[0; 8])
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.param("peft.prompt").is_some());
    for (name, _) in base.named_parameters() {
        assert!(grads.param(&format!("base.{name}")).is_none(), "{name}");
    }
}

#[test]
fn lora_zero_scale_is_identity_and_rank_is_checked() {
    let base = small_base();
    let hp = PeftHyperparams {
        lora_scale: 0.0,
        ..Default::default()
    };
    let mut m = peft::build(Technique::LoRA, &hp, base.config()).unwrap();
    randomize(m.as_mut(), 5);
    let composed = attach(base.clone(), m).unwrap();
    let toks = vec![vec![3, 1, 4, 1, 5]];
    assert!(logits(&composed, &toks).bit_eq(&logits(&ComposedModel::new(base.clone()), &toks)));

    let hp = PeftHyperparams {
        lora_rank: 17,
        ..Default::default()
    };
    assert!(matches!(
        peft::build(Technique::LoRA, &hp, base.config()),
        Err(PeftError::Config(_))
    ));
}

#[test]
fn prefix_concatenation_is_gated_addition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let (t, n, d) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(2..9));
        let mut draw = |r| Tensor::uniform(&[r, d], 1.5, &mut rng);
        let (q, k, v, pk, pv) = (draw(t), draw(t), draw(t), draw(n), draw(n));
        let causal = trial % 2 == 0;
        let (joint, gated, lambda) = prefix_attention_forms(&q, &k, &v, &pk, &pv, causal).unwrap();
        assert!(joint.max_abs_diff(&gated) <= 1e-10);
        assert!(lambda.iter().all(|l| (0.0..=1.0).contains(l)));
    }
}

#[test]
fn prefix_export_is_functionally_identical_and_smaller() {
    let base = small_base();
    let hp = PeftHyperparams {
        n_virtual_tokens: 4,
        ..Default::default()
    };
    let prefix = PrefixTuning::build(&hp, base.config()).unwrap();
    let export = prefix.export_final();
    assert_eq!(export.variant(), "final");
    for l in 0..2 {
        assert_eq!(per_layer_count(&export, l), 2 * 4 * 16);
    }
    assert!(export.params().total() < prefix.params().total());
    let toks = vec![vec![1, 2, 3], vec![4, 5, 6]];
    let a = logits(&attach(base.clone(), Box::new(prefix)).unwrap(), &toks);
    let b = logits(&attach(base.clone(), Box::new(export)).unwrap(), &toks);
    assert!(a.bit_eq(&b));
    assert_eq!(a.shape(), &[2, 3, 12]);
}

#[test]
fn prefix_width_other_than_model_width_is_rejected() {
    let cfg = BaseConfig::new(1, 16, 2, 8);
    let hp = PeftHyperparams {
        prefix_dim: Some(8),
        ..Default::default()
    };
    assert!(matches!(PrefixTuning::build(&hp, &cfg), Err(PeftError::Config(_))));
}

fn kron_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (r, s) = (b.shape()[1], b.shape()[2]);
    let mut out = Tensor::zeros(&[p * r, q * s]);
    for i in 0..n {
        for row in 0..p * r {
            for col in 0..q * s {
                let av = a.at(&[i, row / r, col / s]);
                let bv = b.at(&[i, row % r, col % s]);
                let acc = if i == 0 { av * bv } else { out.at(&[row, col]) + av * bv };
                out.set(&[row, col], acc);
            }
        }
    }
    out
}

#[test]
fn compacter_weights_equal_kronecker_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [1, 2, 4] {
        let cfg = BaseConfig::new(1, 8, 2, 8);
        let hp = PeftHyperparams {
            kron_order: n,
            bottleneck_dim: 4,
            ..Default::default()
        };
        let mut c = Compacter::build(&hp, &cfg).unwrap();
        randomize(&mut c, rng.gen());
        let (down, up) = c.materialized(0, "attn").unwrap();
        let a = c.params().get("layer0.attn.shared");
        assert_eq!(down.shape(), &[8, 4]);
        assert_eq!(up.shape(), &[4, 8]);
        assert!(down.bit_eq(&kron_oracle(a, c.params().get("layer0.attn.down"))));
        assert!(up.bit_eq(&kron_oracle(a, c.params().get("layer0.attn.up"))));
        assert!(kron_sum(a, c.params().get("layer0.attn.down")).unwrap().bit_eq(&down));
    }
}

#[test]
fn compacter_shared_factor_feeds_both_projections() {
    let cfg = BaseConfig::new(1, 8, 2, 8);
    let mut c = Compacter::build(&PeftHyperparams::default(), &cfg).unwrap();
    randomize(&mut c, 2);
    let (d0, u0) = c.materialized(0, "ffn").unwrap();
    c.params_mut().get_mut("layer0.ffn.shared").data_mut()[0] += 0.25;
    let (d1, u1) = c.materialized(0, "ffn").unwrap();
    assert!(!d0.bit_eq(&d1));
    assert!(!u0.bit_eq(&u1));
    // the other compacter in the layer is untouched
    let (da, _) = c.materialized(0, "attn").unwrap();
    c.params_mut().get_mut("layer0.ffn.shared").data_mut()[0] -= 1.0;
    assert!(da.bit_eq(&c.materialized(0, "attn").unwrap().0));
}

#[test]
fn compacter_requires_divisible_dims() {
    let cfg = BaseConfig::new(1, 8, 2, 8);
    let hp = PeftHyperparams {
        kron_order: 3,
        ..Default::default()
    };
    assert!(matches!(Compacter::build(&hp, &cfg), Err(PeftError::Config(_))));
}

#[test]
fn ia3_value_scale_doubles_attention_result() {
    let base = small_base();
    let toks = vec![vec![2, 7, 1, 8]];
    let run = |v: f64| {
        let mut m = Ia3::build(&PeftHyperparams::default(), base.config()).unwrap();
        m.params_mut().get_mut("layer0.value").data_mut().fill(v);
        let composed = attach(base.clone(), Box::new(m)).unwrap();
        let tape = Tape::new();
        composed.forward_trace(&tape, &toks).unwrap().1
    };
    let (one, two) = (run(1.0), run(2.0));
    assert!(one.layers[0].attention_probs[0][0].bit_eq(&two.layers[0].attention_probs[0][0]));
    let doubled = Tensor::from_fn(one.layers[0].attention_context.shape(), |i| {
        2.0 * one.layers[0].attention_context.data()[i]
    });
    assert!(doubled.bit_eq(&two.layers[0].attention_context));
}

#[test]
fn tiny_attention_weights_follow_token_permutation() {
    let mut cfg = BaseConfig::new(1, 8, 2, 8);
    cfg.causal = false;
    let hp = PeftHyperparams {
        tiny_dim: 3,
        ..Default::default()
    };
    let m = TinyAttention::build(&hp, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::uniform(&[5, 8], 1.0, &mut rng);
    let w = m.mixture_weights(0, &h).unwrap();
    let perm = [0, 3, 2, 1, 4];
    let hp_ = Tensor::from_fn(&[5, 8], |i| h.at(&[perm[i / 8], i % 8]));
    let wp = m.mixture_weights(0, &hp_).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert!((wp.at(&[i, j]) - w.at(&[perm[i], perm[j]])).abs() < 1e-12);
        }
    }
    // input-dependent: a different input changes the mixture
    let other = m.mixture_weights(0, &Tensor::uniform(&[5, 8], 1.0, &mut rng)).unwrap();
    assert!(other.max_abs_diff(&w) > 1e-6);
}

#[test]
fn modules_touch_only_their_bound_slots() {
    let base = small_base();
    let toks = vec![vec![1, 2, 3]];
    for t in Technique::ALL {
        let mut m = peft::build(t, &PeftHyperparams::default(), base.config()).unwrap();
        randomize(m.as_mut(), 9);
        let bound: BTreeSet<SlotId> = m.bindings().iter().map(|b| b.slot).collect();
        let touched = RefCell::new(BTreeSet::new());
        let mut hooks = HookMap::new();
        for slot in SlotId::all(base.config().num_layers) {
            let (m, touched, bound) = (&m, &touched, &bound);
            hooks.insert(slot, move |tape: &Tape, slot: SlotId, value: SlotValue| {
                if bound.contains(&slot) {
                    touched.borrow_mut().insert(slot);
                    m.apply(tape, slot, value)
                } else {
                    assert!(m.apply(tape, slot, value).is_err(), "{slot}");
                    Ok(value)
                }
            });
        }
        let tape = Tape::new();
        forward_with_hooks(&base, &tape, &toks, &hooks).unwrap();
        assert_eq!(*touched.borrow(), bound, "{t}");

        // the module's own hook map covers exactly the same slots
        let own: BTreeSet<SlotId> = m.hooks().slots().collect();
        assert_eq!(own, bound, "{t}");
    }
}

#[test]
fn attach_detach_round_trip_and_policies() {
    let base = small_base();
    let toks = vec![vec![4, 4, 2]];
    let pure = logits(&ComposedModel::new(base.clone()), &toks);
    let mut m = peft::build(Technique::Adapters, &PeftHyperparams::default(), base.config()).unwrap();
    randomize(m.as_mut(), 1);
    let mut composed = attach(base.clone(), m).unwrap();
    assert!(!logits(&composed, &toks).bit_eq(&pure));

    let second = peft::build(Technique::LoRA, &PeftHyperparams::default(), base.config()).unwrap();
    assert!(matches!(composed.attach(second), Err(PeftError::Composition(_))));

    let detached = composed.detach().unwrap();
    assert_eq!(detached.technique(), Technique::Adapters);
    assert!(logits(&composed, &toks).bit_eq(&pure));

    let other_cfg = BaseConfig::new(2, 32, 2, 12);
    let foreign = peft::build(Technique::IA3, &PeftHyperparams::default(), &other_cfg).unwrap();
    assert!(matches!(attach(base, foreign), Err(PeftError::Composition(_))));
}

#[test]
fn insertion_layer_subset_binds_only_those_layers() {
    let cfg = BaseConfig::new(3, 8, 2, 8);
    let hp = PeftHyperparams {
        layers: Some(vec![1]),
        ..Default::default()
    };
    let m = peft::build(Technique::Adapters, &hp, &cfg).unwrap();
    assert!(m.bindings().iter().all(|b| b.slot.layer() == Some(1)));
    assert_eq!(m.params().iter().filter(|p| p.site != Site::Layer(1)).count(), 0);
}

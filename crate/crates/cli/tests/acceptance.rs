//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any criterion fails. Runs without the libtest harness so the
//! lines always print.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use peft_ref::analyzer::{empirical_param_count, tabulated_param_count, parity};
use peft_ref::model::{BaseConfig, BaseModel};
use peft_ref::peft::{self, prefix_attention_forms, Compacter, ComposedModel, PeftHyperparams, PeftModule};
use peft_ref::store;
use peft_ref::tensor::{Tape, Tensor};
use peft_ref::trainer::{self, TaskSpec, TrainConfig};
use peft_ref::typology::{validate_descriptor, Technique};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn logits(model: &ComposedModel, tokens: &[Vec<usize>]) -> Tensor {
    let tape = Tape::new();
    let out = model.forward(&tape, tokens).expect("forward");
    tape.value(out)
}

fn randomize(module: &mut dyn PeftModule, rng: &mut ChaCha8Rng, bound: f64) {
    for p in module.params_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-bound..bound);
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Vec<usize>> {
    let (b, t) = (rng.gen_range(1..4), rng.gen_range(1..9));
    (0..b)
        .map(|_| (0..t).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

fn parameter_parity() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for d in [8, 16, 32] {
        let cfg = BaseConfig::new(2, d, 2, 8);
        for k in [1, 2, 4, 8] {
            for n in [1, 4, 8] {
                let hp = PeftHyperparams {
                    n_virtual_tokens: n,
                    bottleneck_dim: k,
                    lora_rank: k,
                    tiny_dim: 1,
                    kron_order: if k % 2 == 0 { 2 } else { 1 },
                    ..Default::default()
                };
                for t in Technique::ALL {
                    let m = peft::build(t, &hp, &cfg).map_err(|e| format!("{t} d={d} k={k} n={n}: {e}"))?;
                    let count = empirical_param_count(m.as_ref());
                    let formula = tabulated_param_count(t, &hp, &cfg);
                    let (ok, note) = parity(t, formula, &count, &hp);
                    if t == Technique::Compacters {
                        ensure(!ok && !note.is_empty(), || {
                            format!("compacter parity not pinned at d={d} k={k}")
                        })?;
                    } else {
                        ensure(ok, || {
                            format!("{t} d={d} k={k} n={n}: formula {formula}, counted {count:?}")
                        })?;
                    }
                    checked += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!("{checked} configurations in {took:.2?}"))
}

fn registry_fidelity() -> Outcome {
    let cfg = BaseConfig::new(2, 16, 2, 8);
    for t in Technique::ALL {
        let m = peft::build(t, &PeftHyperparams::default(), &cfg).map_err(|e| e.to_string())?;
        let diffs = validate_descriptor(&m.descriptor()).map_err(|e| e.to_string())?;
        ensure(diffs.is_empty(), || format!("{t}: {diffs:?}"))?;
    }
    Ok("7 modules, 0 mismatches".into())
}

fn noop_at_init() -> Outcome {
    let base = Arc::new(BaseModel::build(BaseConfig::new(2, 16, 2, 12), 5).unwrap());
    let plain = ComposedModel::new(base.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hp = PeftHyperparams {
        tiny_dim: 4,
        ..Default::default()
    };
    let zero_init = [
        Technique::LoRA,
        Technique::Adapters,
        Technique::TinyAttention,
        Technique::IA3,
    ];
    let models: Vec<ComposedModel> = zero_init
        .iter()
        .map(|&t| peft::attach(base.clone(), peft::build(t, &hp, base.config()).unwrap()).unwrap())
        .collect();
    for _ in 0..100 {
        let toks = random_tokens(&mut rng, 12);
        let reference = logits(&plain, &toks);
        for (t, m) in zero_init.iter().zip(&models) {
            ensure(logits(m, &toks).bit_eq(&reference), || {
                format!("{t} changes logits at init")
            })?;
        }
    }
    for t in [Technique::PromptTuning, Technique::PrefixTuning] {
        let m = peft::attach(base.clone(), peft::build(t, &hp, base.config()).unwrap()).unwrap();
        let toks = vec![vec![1, 2, 3]; 2];
        let shape = logits(&m, &toks).shape().to_vec();
        ensure(shape == [2, 3, 12], || format!("{t}: logits shape {shape:?}"))?;
    }
    Ok("100 inputs bit-identical for 4 techniques; prompt/prefix shapes ok".into())
}

fn head(t: &Tensor, b: usize, h: usize, dh: usize, rows: std::ops::Range<usize>) -> Tensor {
    let (len, d) = (t.shape()[1], t.shape()[2]);
    let n = rows.len();
    Tensor::from_fn(&[n, dh], |i| {
        t.data()[b * len * d + (rows.start + i / dh) * d + h * dh + i % dh]
    })
}

fn prefix_gated_addition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        // half the draws go through the composed model, half are free-standing
        if trial % 2 == 0 {
            let heads = [1, 2][rng.gen_range(0..2)];
            let d = [8, 16][rng.gen_range(0..2)];
            let mut cfg = BaseConfig::new(rng.gen_range(1..3), d, heads, 10);
            cfg.causal = rng.gen_bool(0.5);
            let base = Arc::new(BaseModel::build(cfg, rng.gen()).unwrap());
            let hp = PeftHyperparams {
                n_virtual_tokens: rng.gen_range(1..6),
                ..Default::default()
            };
            let mut module = peft::build(Technique::PrefixTuning, &hp, base.config()).unwrap();
            randomize(module.as_mut(), &mut rng, 1.0);
            let model = peft::attach(base.clone(), module).unwrap();
            let toks = random_tokens(&mut rng, 10);
            let tape = Tape::new();
            let (_, trace) = model.forward_trace(&tape, &toks).unwrap();
            let dh = d / heads;
            for lt in &trace.layers {
                let (q_len, k_len) = (lt.queries.shape()[1], lt.keys.shape()[1]);
                let n = k_len - q_len;
                for b in 0..toks.len() {
                    for h in 0..heads {
                        let q = head(&lt.queries, b, h, dh, 0..q_len);
                        let (pk, k) = (head(&lt.keys, b, h, dh, 0..n), head(&lt.keys, b, h, dh, n..k_len));
                        let (pv, v) = (head(&lt.values, b, h, dh, 0..n), head(&lt.values, b, h, dh, n..k_len));
                        let (joint, gated, _) = prefix_attention_forms(&q, &k, &v, &pk, &pv, base.config().causal)
                            .map_err(|e| e.to_string())?;
                        let model_ctx = head(&lt.attention_context, b, h, dh, 0..q_len);
                        worst = worst
                            .max(joint.max_abs_diff(&gated))
                            .max(model_ctx.max_abs_diff(&gated));
                    }
                }
            }
        } else {
            let (t, n, d) = (rng.gen_range(1..8), rng.gen_range(1..6), rng.gen_range(2..12));
            let mut draw = |r| Tensor::uniform(&[r, d], 2.0, &mut rng);
            let (q, k, v, pk, pv) = (draw(t), draw(t), draw(t), draw(n), draw(n));
            let (joint, gated, lambda) =
                prefix_attention_forms(&q, &k, &v, &pk, &pv, trial % 4 == 1).map_err(|e| e.to_string())?;
            ensure(lambda.iter().all(|l| (0.0..=1.0).contains(l)), || {
                "prefix mass outside [0, 1]".into()
            })?;
            worst = worst.max(joint.max_abs_diff(&gated));
        }
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("50 configurations, max deviation {worst:.3e}"))
}

fn kron_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (r, s) = (b.shape()[1], b.shape()[2]);
    let mut out = Tensor::zeros(&[p * r, q * s]);
    for i in 0..n {
        for row in 0..p * r {
            for col in 0..q * s {
                let term = a.at(&[i, row / r, col / s]) * b.at(&[i, row % r, col % s]);
                let acc = if i == 0 { term } else { out.at(&[row, col]) + term };
                out.set(&[row, col], acc);
            }
        }
    }
    out
}

fn compacter_kronecker() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for draw in 0..50 {
        let n = [1, 2, 4][draw % 3];
        let d = n * rng.gen_range(1..5) * 2;
        let dh = n * rng.gen_range(1..4);
        let cfg = BaseConfig::new(1, d, 2, 8);
        let hp = PeftHyperparams {
            kron_order: n,
            bottleneck_dim: dh,
            ..Default::default()
        };
        let mut c = Compacter::build(&hp, &cfg).map_err(|e| e.to_string())?;
        randomize(&mut c, &mut rng, 1.0);
        for sub in ["attn", "ffn"] {
            let (down, up) = c.materialized(0, sub).map_err(|e| e.to_string())?;
            let a = c.params().get(&format!("layer0.{sub}.shared"));
            let bd = c.params().get(&format!("layer0.{sub}.down"));
            let bu = c.params().get(&format!("layer0.{sub}.up"));
            ensure(
                down.bit_eq(&kron_oracle(a, bd)) && up.bit_eq(&kron_oracle(a, bu)),
                || format!("draw {draw}: N={n} d={d} d_h={dh} {sub} differs from oracle"),
            )?;
        }
        let (d0, u0) = c.materialized(0, "attn").unwrap();
        let shared = c.params_mut().get_mut("layer0.attn.shared");
        let i = rng.gen_range(0..shared.numel());
        shared.data_mut()[i] += 0.5;
        let (d1, u1) = c.materialized(0, "attn").unwrap();
        ensure(!d0.bit_eq(&d1) && !u0.bit_eq(&u1), || {
            format!("draw {draw}: shared factor not shared")
        })?;
    }
    Ok("50 draws exact; shared factor feeds both projections".into())
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for t in Technique::ALL {
        let r = trainer::gradcheck_technique(t, 0).map_err(|e| e.to_string())?;
        ensure(r.max_error() <= 1e-4, || format!("{t}: {:.3e}", r.max_error()))?;
        worst = worst.max(r.max_error());
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("max relative error {worst:.3e} in {took:.2?}"))
}

fn frozen_base() -> Outcome {
    let base = Arc::new(BaseModel::build(BaseConfig::new(2, 16, 2, 8), 0).unwrap());
    let snapshot = (*base).clone();
    let data = trainer::make_task(&TaskSpec::copy(8, 6, 32, 0)).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        learning_rate: 0.05,
        ..Default::default()
    };
    for t in Technique::ALL {
        let hp = PeftHyperparams {
            tiny_dim: 4,
            ..Default::default()
        };
        let mut m = peft::attach(base.clone(), peft::build(t, &hp, base.config()).unwrap()).unwrap();
        let r = trainer::train(&mut m, &data, &cfg).map_err(|e| format!("{t}: {e}"))?;
        ensure(r.base_hash_before == r.base_hash_after, || {
            format!("{t}: base hash changed")
        })?;
    }
    ensure(*base == snapshot, || "base parameters differ from snapshot".into())?;
    Ok(format!(
        "7 × 100 steps, base hash {:016x} unchanged",
        base.parameter_hash()
    ))
}

fn trainability() -> Outcome {
    let start = Instant::now();
    let base = Arc::new(BaseModel::build(trainer::reference_base_config(), 0).unwrap());
    let data = trainer::make_task(&trainer::reference_task()).unwrap();
    let cfg = trainer::reference_train_config();
    let hp = trainer::reference_hyperparams();
    let mut ratios = Vec::new();
    for t in Technique::ALL {
        let mut m = peft::attach(base.clone(), peft::build(t, &hp, base.config()).unwrap()).unwrap();
        let r = trainer::train(&mut m, &data, &cfg).map_err(|e| format!("{t}: {e}"))?;
        let ratio = r.final_eval().loss / r.initial_eval().loss;
        ratios.push(format!("{}={ratio:.3}", t.slug()));
        ensure(ratio <= 0.5, || format!("{t}: final/initial loss {ratio:.3}"))?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(600), || format!("took {took:?}"))?;
    Ok(format!("{} in {took:.1?}", ratios.join(" ")))
}

fn storage(dir: &Path) -> Outcome {
    let base = Arc::new(BaseModel::build(BaseConfig::new(4, 64, 4, 32), 0).unwrap());
    let base_bytes = store::base_checkpoint(&base).encoded_len();
    let base_path = dir.join("base.pfr");
    store::save_base(&base, &base_path).map_err(|e| e.to_string())?;
    let loaded_base = store::load_base(&base_path).map_err(|e| e.to_string())?;
    ensure(loaded_base == *base, || "base checkpoint does not round-trip".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut ratios = Vec::new();
    for t in Technique::ALL {
        let mut module = peft::build(t, &PeftHyperparams::default(), base.config()).unwrap();
        randomize(module.as_mut(), &mut rng, 0.3);
        let stored = module.exported();
        let ratio = store::peft_checkpoint(stored.as_ref()).encoded_len() as f64 / base_bytes as f64;
        ratios.push(format!("{}={:.2}%", t.slug(), 100.0 * ratio));
        ensure(ratio < 0.10, || format!("{t}: {:.2}% of base", 100.0 * ratio))?;
        if matches!(t, Technique::IA3 | Technique::PromptTuning) {
            ensure(ratio < 0.01, || format!("{t}: {:.3}% of base", 100.0 * ratio))?;
        }
        if t == Technique::PrefixTuning {
            let full = store::peft_checkpoint(module.as_ref()).encoded_len();
            let exported = store::peft_checkpoint(stored.as_ref()).encoded_len();
            ensure(exported < full, || format!("prefix export {exported} >= full {full}"))?;
        }
        let path = dir.join(format!("{}.pfr", t.slug()));
        store::save_peft(stored.as_ref(), &path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let decoded = store::load_peft(&path).map_err(|e| e.to_string())?;
        ensure(decoded.encode() == bytes, || format!("{t}: re-encoding differs"))?;
        let reloaded = store::load_and_attach(base.clone(), &path).map_err(|e| e.to_string())?;
        let original = peft::attach(base.clone(), module).unwrap();
        let toks = vec![vec![3, 1, 4, 1, 5], vec![9, 2, 6, 5, 3]];
        ensure(logits(&reloaded, &toks).bit_eq(&logits(&original, &toks)), || {
            format!("{t}: reloaded behaviour differs")
        })?;
    }
    Ok(ratios.join(" "))
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_peft-ref"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`{}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn cli_determinism(dir: &Path) -> Outcome {
    let p = |name: &str| dir.join(name).display().to_string();
    let runs: Vec<(Vec<String>, Vec<String>)> = vec![
        (
            vec![
                "init-base".into(),
                "--seed".into(),
                "7".into(),
                "--out".into(),
                p("b{}.pfr"),
            ],
            vec![p("b{}.pfr")],
        ),
        (vec!["analyze".into(), "--format".into(), "csv".into()], vec![]),
        (
            vec![
                "analyze".into(),
                "--format".into(),
                "text".into(),
                "--dim".into(),
                "32".into(),
            ],
            vec![],
        ),
        (
            vec![
                "train".into(),
                "--technique".into(),
                "lora".into(),
                "--vocab".into(),
                "8".into(),
                "--steps".into(),
                "20".into(),
                "--out".into(),
                p("train{}.csv"),
            ],
            vec![p("train{}.csv")],
        ),
        (
            vec![
                "sweep".into(),
                "--technique".into(),
                "lora,ia3".into(),
                "--vocab".into(),
                "8".into(),
                "--steps".into(),
                "10".into(),
                "--seeds".into(),
                "0,1,2".into(),
                "--out".into(),
                p("sweep{}"),
            ],
            vec![
                format!("{}/curves.csv", p("sweep{}")),
                format!("{}/summary.csv", p("sweep{}")),
            ],
        ),
        (vec!["gradcheck".into()], vec![]),
        (
            vec![
                "export".into(),
                "--technique".into(),
                "prefix".into(),
                "--vocab".into(),
                "8".into(),
                "--steps".into(),
                "5".into(),
                "--out".into(),
                p("prefix{}.pfr"),
            ],
            vec![p("prefix{}.pfr")],
        ),
        (vec!["validate-typology".into()], vec![]),
    ];
    for (args, files) in &runs {
        let mut outputs = Vec::new();
        for rep in ["1", "2"] {
            let a: Vec<String> = args.iter().map(|s| s.replace("{}", rep)).collect();
            let refs: Vec<&str> = a.iter().map(String::as_str).collect();
            let stdout = run_cli(&refs)?;
            // paths differ between the two runs by construction
            let mut stdout = String::from_utf8_lossy(&stdout).into_owned();
            for template in args.iter().filter(|s| s.contains("{}")) {
                stdout = stdout.replace(&template.replace("{}", rep), template);
            }
            let mut blobs = vec![stdout.into_bytes()];
            for f in files {
                blobs.push(std::fs::read(f.replace("{}", rep)).map_err(|e| format!("{f}: {e}"))?);
            }
            outputs.push(blobs);
        }
        ensure(outputs[0] == outputs[1], || {
            format!("`{}` output differs between runs", args[0])
        })?;
    }
    Ok(format!("{} commands byte-identical across reruns", runs.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("parameter-count parity", Box::new(parameter_parity)),
        ("registry fidelity", Box::new(registry_fidelity)),
        ("no-op initialization", Box::new(noop_at_init)),
        ("prefix gated-addition equivalence", Box::new(prefix_gated_addition)),
        ("compacter Kronecker correctness", Box::new(compacter_kronecker)),
        ("gradient checks", Box::new(gradient_checks)),
        ("frozen base", Box::new(frozen_base)),
        ("trainability", Box::new(trainability)),
        ("storage efficiency", Box::new(|| storage(dir.path()))),
        ("CLI determinism", Box::new(|| cli_determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::sync::Arc;

use peft_ref::analyzer::empirical_param_count;
use peft_ref::model::{BaseConfig, BaseModel};
use peft_ref::peft::{self, PeftHyperparams};
use peft_ref::trainer::*;
use peft_ref::typology::Technique;

fn base(vocab: usize) -> Arc<BaseModel> {
    Arc::new(BaseModel::build(BaseConfig::new(2, 16, 2, vocab), 0).unwrap())
}

fn lora_hp() -> PeftHyperparams {
    PeftHyperparams {
        lora_rank: 4,
        ..Default::default()
    }
}

#[test]
fn copy_targets_are_the_inputs() {
    let data = make_task(&TaskSpec::copy(8, 6, 20, 3)).unwrap();
    assert_eq!(data.len(), 20);
    for e in &data {
        assert_eq!(e.tokens.len(), 6);
        assert_eq!(e.target, Target::PerToken(e.tokens.clone()));
    }
    assert_eq!(data, make_task(&TaskSpec::copy(8, 6, 20, 3)).unwrap());
    assert_ne!(data, make_task(&TaskSpec::copy(8, 6, 20, 4)).unwrap());
}

#[test]
fn classification_and_parity_labels() {
    let spec = TaskSpec {
        kind: TaskKind::Classification,
        ..TaskSpec::copy(8, 5, 10, 0)
    };
    for e in make_task(&spec).unwrap() {
        assert_eq!(e.target, Target::PerToken(e.tokens.iter().map(|t| t % 2).collect()));
    }
    let spec = TaskSpec {
        kind: TaskKind::Parity,
        ..TaskSpec::copy(8, 7, 512, 0)
    };
    let data = make_task(&spec).unwrap();
    let ones = data.iter().filter(|e| e.target == Target::Final(1)).count() as f64;
    assert!((ones / 512.0 - 0.5).abs() <= 0.1, "{ones} of 512");
    for e in &data {
        let p = e.tokens.iter().filter(|&&t| t < 4).count() % 2;
        assert_eq!(e.target, Target::Final(p));
    }
}

#[test]
fn small_vocabularies_are_rejected() {
    let spec = TaskSpec {
        kind: TaskKind::Parity,
        ..TaskSpec::copy(3, 5, 10, 0)
    };
    assert!(matches!(make_task(&spec), Err(TrainError::Config(_))));
    assert!(matches!(
        make_task(&TaskSpec::copy(1, 5, 10, 0)),
        Err(TrainError::Config(_))
    ));
    assert!("sorting".parse::<TaskKind>().is_err());
}

#[test]
fn lora_halves_copy_loss_in_a_hundred_steps() {
    let b = base(8);
    let data = make_task(&TaskSpec::copy(8, 6, 64, 1)).unwrap();
    let mut model = peft::attach(b.clone(), peft::build(Technique::LoRA, &lora_hp(), b.config()).unwrap()).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 16,
        learning_rate: 0.05,
        ..Default::default()
    };
    let r = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(r.losses.len(), 100);
    assert!(r.final_eval().loss <= 0.5 * r.initial_eval().loss, "{:?}", r.evals);
    assert_eq!(r.base_hash_before, r.base_hash_after);
    assert_eq!(r.base_hash_after, b.parameter_hash());
    assert_eq!(r.trainable_params, 2 * 2 * 2 * 4 * 16);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let b = base(8);
    let data = make_task(&TaskSpec::copy(8, 6, 32, 1)).unwrap();
    let module = peft::build(Technique::Adapters, &PeftHyperparams::default(), b.config()).unwrap();
    let before = module_hash(module.as_ref());
    let mut model = peft::attach(b, module).unwrap();
    let cfg = TrainConfig {
        steps: 10,
        learning_rate: 0.0,
        eval_every: 5,
        ..Default::default()
    };
    let r = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(r.param_hash, before);
    assert_eq!(r.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 5, 10]);
    for e in &r.evals {
        assert!((e.loss - r.evals[0].loss).abs() <= 1e-12);
    }
}

#[test]
fn invalid_training_configs() {
    let b = base(8);
    let data = make_task(&TaskSpec::copy(8, 4, 8, 0)).unwrap();
    let mut model = peft::attach(
        b.clone(),
        peft::build(Technique::IA3, &PeftHyperparams::default(), b.config()).unwrap(),
    )
    .unwrap();
    for cfg in [
        TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        },
        TrainConfig {
            steps: 0,
            ..Default::default()
        },
        TrainConfig {
            beta1: 1.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(train(&mut model, &data, &cfg), Err(TrainError::Config(_))));
    }
    let too_wide = make_task(&TaskSpec::copy(16, 4, 8, 0)).unwrap();
    assert!(matches!(
        train(&mut model, &too_wide, &TrainConfig::default()),
        Err(TrainError::Config(_))
    ));
    let mut bare = peft::ComposedModel::new(b);
    assert!(matches!(
        train(&mut bare, &data, &TrainConfig::default()),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn sweeps_are_complete_and_reproducible() {
    let b = base(8);
    let techniques = vec![
        (Technique::LoRA, lora_hp()),
        (Technique::IA3, PeftHyperparams::default()),
    ];
    let task = TaskSpec::copy(8, 5, 32, 0);
    let cfg = TrainConfig {
        steps: 20,
        learning_rate: 0.05,
        ..Default::default()
    };
    let run = || convergence_sweep(b.clone(), &techniques, &task, &cfg, &[0, 1, 2]).unwrap();
    let a = run();
    assert_eq!(a.curves.len(), 6);
    assert_eq!(a.summary.len(), 2);
    assert_eq!(
        a.curves.iter().map(|c| (c.technique, c.seed)).collect::<Vec<_>>(),
        [Technique::LoRA, Technique::IA3]
            .iter()
            .flat_map(|&t| [0, 1, 2].map(|s| (t, s)))
            .collect::<Vec<_>>()
    );
    assert!(a.summary.iter().all(|s| s.seeds == 3 && s.final_loss_std >= 0.0));
    let again = run();
    assert_eq!(a, again);
    let header = vec![("task".to_string(), task.canonical_text())];
    assert_eq!(a.curves_csv(&header), again.curves_csv(&header));
    let summary = a.summary_csv(&header);
    assert!(summary.starts_with("# task=task=copy;"));
    assert_eq!(
        summary.lines().nth(1).unwrap(),
        "technique,param_count,seeds,final_loss_mean,final_loss_std,reached_half,mean_steps_to_half"
    );
    assert!(convergence_sweep(b, &techniques, &task, &cfg, &[]).is_err());
}

#[test]
fn stability_rows_track_budgets() {
    let b = base(8);
    let budgets: Vec<PeftHyperparams> = [1, 4]
        .map(|r| PeftHyperparams {
            lora_rank: r,
            ..Default::default()
        })
        .to_vec();
    let task = TaskSpec::copy(8, 5, 32, 0);
    let cfg = TrainConfig {
        steps: 15,
        learning_rate: 0.05,
        ..Default::default()
    };
    let rows = stability_report(b.clone(), Technique::LoRA, &budgets, &task, &cfg, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, hp) in rows.iter().zip(&budgets) {
        let m = peft::build(Technique::LoRA, hp, b.config()).unwrap();
        assert_eq!(row.param_count, empirical_param_count(m.as_ref()).total);
        assert!(row.final_loss_std >= 0.0 && row.final_accuracy_std >= 0.0);
    }
    assert_eq!(rows[0].budget, "r=1");
    let csv = stability_csv(&rows, &[("technique".into(), "lora".into())]);
    assert!(csv.starts_with("# technique=lora\nbudget,param_count,"));
    assert!(stability_report(b, Technique::LoRA, &budgets, &task, &cfg, &[0]).is_err());
}

#[test]
fn run_csv_has_a_header_and_rows() {
    let b = base(8);
    let data = make_task(&TaskSpec::copy(8, 4, 16, 0)).unwrap();
    let mut model = peft::attach(
        b.clone(),
        peft::build(Technique::PromptTuning, &PeftHyperparams::default(), b.config()).unwrap(),
    )
    .unwrap();
    let r = train(
        &mut model,
        &data,
        &TrainConfig {
            steps: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let csv = run_csv(&r, &[("seed".into(), "0".into())]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# seed=0");
    assert!(lines
        .iter()
        .take_while(|l| l.starts_with("# "))
        .all(|l| l.contains('=')));
    assert!(lines.contains(&"kind,step,loss,accuracy"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("train,")).count(), 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("eval,")).count(), 2);
}

#[test]
fn steps_to_half() {
    assert_eq!(steps_to_fraction(&[4.0, 3.0, 2.5, 2.0, 1.0], 0.5), Some(3));
    assert_eq!(steps_to_fraction(&[4.0, 3.0], 0.5), None);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for t in Technique::ALL {
        let report = gradcheck_technique(t, 11).unwrap();
        assert!(!report.errors.is_empty());
        assert!(report.max_error() <= 1e-4, "{t}: {:?}", report.errors);
    }
}

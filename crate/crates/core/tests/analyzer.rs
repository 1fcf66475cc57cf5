use peft_ref::analyzer::{
    comparison_report, complexity_class, control_storage_ratio, empirical_param_count, tabulated_param_count,
    storage_ratio, AnalyzerError, ComplexityClass,
};
use peft_ref::model::{BaseConfig, BaseModel};
use peft_ref::peft::{self, PeftHyperparams};
use peft_ref::typology::Technique;

fn hp() -> PeftHyperparams {
    PeftHyperparams {
        n_virtual_tokens: 8,
        bottleneck_dim: 4,
        lora_rank: 2,
        kron_order: 2,
        ..Default::default()
    }
}

#[test]
fn formulas_at_reference_dims() {
    let cfg = BaseConfig::new(2, 16, 2, 16);
    assert_eq!(tabulated_param_count(Technique::PromptTuning, &hp(), &cfg), 128);
    assert_eq!(tabulated_param_count(Technique::IA3, &hp(), &cfg), 96);
    assert_eq!(tabulated_param_count(Technique::Adapters, &hp(), &cfg), 256);
    assert_eq!(tabulated_param_count(Technique::LoRA, &hp(), &cfg), 128);
    let hp4 = PeftHyperparams {
        n_virtual_tokens: 4,
        ..hp()
    };
    assert_eq!(tabulated_param_count(Technique::PrefixTuning, &hp4, &cfg), 832);
}

#[test]
fn complexity_tags() {
    assert_eq!(complexity_class(Technique::PromptTuning), ComplexityClass::Constant);
    assert_eq!(complexity_class(Technique::Compacters).as_str(), "O(kd/N)");
    assert_eq!(complexity_class(Technique::TinyAttention).as_str(), "O(T)");
    assert_eq!(complexity_class(Technique::LoRA).as_str(), "O(rd)");
    assert_eq!(complexity_class(Technique::IA3).as_str(), "O(1)");
}

#[test]
fn empirical_counts_group_by_layer() {
    let cfg = BaseConfig::new(2, 16, 2, 16);
    let lora = peft::build(Technique::LoRA, &hp(), &cfg).unwrap();
    let c = empirical_param_count(lora.as_ref());
    assert_eq!(c.per_layer.values().copied().collect::<Vec<_>>(), vec![128, 128]);
    assert_eq!(c.total, 256);
    for layers in [1, 3] {
        let cfg = BaseConfig::new(layers, 16, 2, 16);
        let prompt = peft::build(Technique::PromptTuning, &hp(), &cfg).unwrap();
        let c = empirical_param_count(prompt.as_ref());
        assert_eq!((c.total, c.non_layer, c.per_layer.len()), (128, 128, 0));
    }
    let compacter = empirical_param_count(peft::build(Technique::Compacters, &hp(), &cfg).unwrap().as_ref());
    let adapter = empirical_param_count(peft::build(Technique::Adapters, &hp(), &cfg).unwrap().as_ref());
    assert!(compacter.total < adapter.total);
}

#[test]
fn parity_holds_except_compacter_over_sweep() {
    for d in [8, 16, 32] {
        for dh in [2, 4, 8] {
            for n in [1, 4, 8] {
                for r in [1, 2, 4] {
                    let cfg = BaseConfig::new(2, d, 2, 16);
                    let hp = PeftHyperparams {
                        n_virtual_tokens: n,
                        bottleneck_dim: dh,
                        lora_rank: r,
                        ..hp()
                    };
                    let report = comparison_report(&Technique::ALL, &hp, &cfg).unwrap();
                    for row in &report.rows {
                        let expect = row.technique != Technique::Compacters;
                        assert_eq!(row.parity, expect, "{} d={d} dh={dh} n={n} r={r}", row.technique);
                        if !row.parity {
                            assert!(!row.note.is_empty());
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn counts_are_monotone_in_each_dimension() {
    let cfg = BaseConfig::new(2, 16, 2, 16);
    let total = |t, hp: &PeftHyperparams| empirical_param_count(peft::build(t, hp, &cfg).unwrap().as_ref()).total;
    for t in Technique::ALL {
        let mut last = 0;
        for k in [2, 4, 8] {
            let hp = PeftHyperparams {
                n_virtual_tokens: k,
                bottleneck_dim: k,
                lora_rank: k,
                tiny_dim: k,
                ..hp()
            };
            let now = total(t, &hp);
            assert!(now >= last, "{t}");
            last = now;
        }
    }
}

#[test]
fn storage_ratios_on_reference_base() {
    let base = BaseModel::build(BaseConfig::new(4, 64, 4, 32), 0).unwrap();
    let ia3 = peft::build(Technique::IA3, &hp(), base.config()).unwrap();
    assert!(storage_ratio(&base, ia3.as_ref()) < 0.01);
    let prompt = peft::build(Technique::PromptTuning, &hp(), base.config()).unwrap();
    assert!(storage_ratio(&base, prompt.as_ref()) < 0.005);
    let control = control_storage_ratio(&base);
    assert!((control - 1.0).abs() < 1e-3, "{control}");
}

#[test]
fn report_shapes_and_formats() {
    let cfg = BaseConfig::new(2, 16, 2, 16);
    let all = comparison_report(&Technique::ALL, &hp(), &cfg).unwrap();
    assert_eq!(all.rows.len(), 7);
    assert_eq!(all.rows.iter().filter(|r| r.parity).count(), 6);
    let csv = all.to_csv().unwrap();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 8);
    assert!(data[0].starts_with("technique,complexity,formula_per_layer"));
    assert_eq!(
        csv,
        comparison_report(&Technique::ALL, &hp(), &cfg)
            .unwrap()
            .to_csv()
            .unwrap()
    );
    let text = all.to_text();
    assert_eq!(text, comparison_report(&Technique::ALL, &hp(), &cfg).unwrap().to_text());
    assert!(text.contains("Compacters"));

    let one = comparison_report(&[Technique::LoRA], &hp(), &cfg).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(comparison_report(&[], &hp(), &cfg), Err(AnalyzerError::EmptyList));
}

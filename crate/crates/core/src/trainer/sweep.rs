use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use super::{make_task, train, RunRecord, TaskSpec, TrainConfig, TrainError};
use crate::model::BaseModel;
use crate::peft::{self, PeftHyperparams};
use crate::typology::Technique;

/// One training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub technique: Technique,
    pub seed: u64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub technique: Technique,
    pub param_count: usize,
    pub seeds: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    /// Runs whose evaluation loss reached half its initial value.
    pub reached_half: usize,
    /// Mean training step at which the batch loss first fell to half of
    /// the first batch loss, over runs that got there.
    pub mean_steps_to_half: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub curves: Vec<Curve>,
    pub summary: Vec<SweepSummary>,
}

/// First step whose loss is at most `fraction` of the first loss.
pub fn steps_to_fraction(losses: &[f64], fraction: f64) -> Option<usize> {
    let first = *losses.first()?;
    losses.iter().position(|&l| l <= fraction * first)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run_one(
    base: &Arc<BaseModel>,
    technique: Technique,
    hp: &PeftHyperparams,
    data: &[super::Example],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunRecord, TrainError> {
    let hp = PeftHyperparams { seed, ..hp.clone() };
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let module = peft::build(technique, &hp, base.config())?;
    let mut model = peft::attach(base.clone(), module)?;
    train(&mut model, data, &cfg)
}

/// Trains every (technique, seed) pair; the seed drives both module
/// initialization and batch sampling. Runs execute in parallel; output
/// order is technique-major, then seed, as given.
pub fn convergence_sweep(
    base: Arc<BaseModel>,
    techniques: &[(Technique, PeftHyperparams)],
    task: &TaskSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepResult, TrainError> {
    if seeds.is_empty() || techniques.is_empty() {
        return Err(TrainError::Config(
            "a sweep needs at least one technique and one seed".into(),
        ));
    }
    let data = make_task(task)?;
    let jobs: Vec<(Technique, &PeftHyperparams, u64)> = techniques
        .iter()
        .flat_map(|(t, hp)| seeds.iter().map(move |&s| (*t, hp, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(t, hp, seed)| run_one(&base, t, hp, &data, cfg, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let curves: Vec<Curve> = jobs
        .iter()
        .zip(records)
        .map(|(&(technique, _, seed), record)| Curve {
            technique,
            seed,
            record,
        })
        .collect();
    let summary = curves
        .chunks(seeds.len())
        .map(|runs| {
            let finals: Vec<f64> = runs.iter().map(|c| c.record.final_eval().loss).collect();
            let (final_loss_mean, final_loss_std) = mean_std(&finals);
            let reached_half = runs
                .iter()
                .filter(|c| c.record.final_eval().loss <= 0.5 * c.record.initial_eval().loss)
                .count();
            let steps: Vec<f64> = runs
                .iter()
                .filter_map(|c| steps_to_fraction(&c.record.losses, 0.5))
                .map(|s| s as f64)
                .collect();
            SweepSummary {
                technique: runs[0].technique,
                param_count: runs[0].record.trainable_params,
                seeds: runs.len(),
                final_loss_mean,
                final_loss_std,
                reached_half,
                mean_steps_to_half: (!steps.is_empty()).then(|| mean_std(&steps).0),
            }
        })
        .collect();
    Ok(SweepResult { curves, summary })
}

fn header_lines(header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

impl SweepResult {
    /// Per-step training losses of every curve.
    pub fn curves_csv(&self, header: &[(String, String)]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["technique", "seed", "step", "loss"]);
        for c in &self.curves {
            for (i, l) in c.record.losses.iter().enumerate() {
                let _ = w.write_record([
                    c.technique.slug().to_string(),
                    c.seed.to_string(),
                    i.to_string(),
                    format!("{l:.17e}"),
                ]);
            }
        }
        header_lines(header) + &String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8")
    }

    pub fn summary_csv(&self, header: &[(String, String)]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record([
            "technique",
            "param_count",
            "seeds",
            "final_loss_mean",
            "final_loss_std",
            "reached_half",
            "mean_steps_to_half",
        ]);
        for s in &self.summary {
            let _ = w.write_record([
                s.technique.slug().to_string(),
                s.param_count.to_string(),
                s.seeds.to_string(),
                format!("{:.12e}", s.final_loss_mean),
                format!("{:.12e}", s.final_loss_std),
                s.reached_half.to_string(),
                s.mean_steps_to_half.map_or(String::new(), |m| format!("{m:.3}")),
            ]);
        }
        header_lines(header) + &String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub budget: String,
    pub param_count: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
}

fn budget_label(technique: Technique, hp: &PeftHyperparams) -> String {
    match technique {
        Technique::PromptTuning | Technique::PrefixTuning => format!("n={}", hp.n_virtual_tokens),
        Technique::LoRA => format!("r={}", hp.lora_rank),
        Technique::Adapters => format!("d_h={}", hp.bottleneck_dim),
        Technique::Compacters => format!("d_h={};N={}", hp.bottleneck_dim, hp.kron_order),
        Technique::TinyAttention => format!("d_t={}", hp.tiny_dim),
        Technique::IA3 => "vectors".into(),
    }
}

/// Spread of final metrics across seeds for each parameter budget.
pub fn stability_report(
    base: Arc<BaseModel>,
    technique: Technique,
    budgets: &[PeftHyperparams],
    task: &TaskSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<StabilityRow>, TrainError> {
    if seeds.len() < 2 || budgets.len() < 2 {
        return Err(TrainError::Config(
            "a stability report needs at least two seeds and two budgets".into(),
        ));
    }
    let pairs: Vec<(Technique, PeftHyperparams)> = budgets.iter().map(|hp| (technique, hp.clone())).collect();
    let sweep = convergence_sweep(base, &pairs, task, cfg, seeds)?;
    Ok(sweep
        .curves
        .chunks(seeds.len())
        .zip(budgets)
        .map(|(runs, hp)| {
            let losses: Vec<f64> = runs.iter().map(|c| c.record.final_eval().loss).collect();
            let accs: Vec<f64> = runs.iter().map(|c| c.record.final_eval().accuracy).collect();
            let (final_loss_mean, final_loss_std) = mean_std(&losses);
            let (final_accuracy_mean, final_accuracy_std) = mean_std(&accs);
            StabilityRow {
                budget: budget_label(technique, hp),
                param_count: runs[0].record.trainable_params,
                final_loss_mean,
                final_loss_std,
                final_accuracy_mean,
                final_accuracy_std,
            }
        })
        .collect())
}

pub fn stability_csv(rows: &[StabilityRow], header: &[(String, String)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record([
        "budget",
        "param_count",
        "final_loss_mean",
        "final_loss_std",
        "final_accuracy_mean",
        "final_accuracy_std",
    ]);
    for r in rows {
        let _ = w.write_record([
            r.budget.clone(),
            r.param_count.to_string(),
            format!("{:.12e}", r.final_loss_mean),
            format!("{:.12e}", r.final_loss_std),
            format!("{:.6}", r.final_accuracy_mean),
            format!("{:.6}", r.final_accuracy_std),
        ]);
    }
    header_lines(header) + &String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8")
}

//! Parameter-count formulas, measured counts, complexity tags and storage
//! ratios, gathered into a comparison report.

use std::collections::BTreeMap;
use std::fmt;

use crate::model::{BaseConfig, BaseModel};
use crate::peft::{self, PeftError, PeftHyperparams, PeftModule, Site};
use crate::store;
use crate::typology::Technique;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyzerError {
    #[error("a report needs at least one technique")]
    EmptyList,
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error("CSV output failed: {0}")]
    Csv(String),
}

/// Asymptotic time to produce a module's output for the base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplexityClass {
    Constant,
    Kd,
    Rd,
    SeqLen,
    KdOverN,
}

impl ComplexityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ComplexityClass::Constant => "O(1)",
            ComplexityClass::Kd => "O(kd)",
            ComplexityClass::Rd => "O(rd)",
            ComplexityClass::SeqLen => "O(T)",
            ComplexityClass::KdOverN => "O(kd/N)",
        }
    }
}

impl fmt::Display for ComplexityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tabulated class. Modules that take weights as input and emit weights
/// directly (prompt, rescaling vectors) are constant time.
pub fn complexity_class(technique: Technique) -> ComplexityClass {
    match technique {
        Technique::PromptTuning | Technique::IA3 => ComplexityClass::Constant,
        Technique::PrefixTuning | Technique::Adapters => ComplexityClass::Kd,
        Technique::LoRA => ComplexityClass::Rd,
        Technique::TinyAttention => ComplexityClass::SeqLen,
        Technique::Compacters => ComplexityClass::KdOverN,
    }
}

/// Tabulated parameters per transformer layer, evaluated verbatim.
pub fn tabulated_param_count(technique: Technique, hp: &PeftHyperparams, base: &BaseConfig) -> usize {
    let d = base.model_dim;
    let dh = hp.bottleneck_dim;
    match technique {
        Technique::PromptTuning => hp.n_virtual_tokens * d,
        Technique::PrefixTuning => {
            let dh = hp.prefix_dim.unwrap_or(d);
            hp.n_virtual_tokens * d + d * d + 2 * dh * d
        }
        Technique::LoRA => 2 * (2 * hp.lora_rank * d),
        Technique::TinyAttention => 4 * d,
        Technique::Adapters => 2 * (2 * dh * d),
        Technique::Compacters => 2 * (2 * (dh + d)),
        Technique::IA3 => 6 * d,
    }
}

/// Trainable values grouped by where they are inserted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalCount {
    pub per_layer: BTreeMap<usize, usize>,
    /// Insertions outside the repeated layers (e.g. a prompt matrix).
    pub non_layer: usize,
    pub total: usize,
}

impl EmpiricalCount {
    /// Count at the first layer holding parameters, or 0.
    pub fn first_layer(&self) -> usize {
        self.per_layer.values().next().copied().unwrap_or(0)
    }
}

pub fn empirical_param_count(module: &dyn PeftModule) -> EmpiricalCount {
    let mut per_layer = BTreeMap::new();
    let mut non_layer = 0;
    for (name, t) in module.trainable_tensors() {
        let site = module.params().iter().find(|p| p.name == name).map(|p| p.site);
        match site {
            Some(Site::Layer(l)) => *per_layer.entry(l).or_insert(0) += t.numel(),
            _ => non_layer += t.numel(),
        }
    }
    let total = per_layer.values().sum::<usize>() + non_layer;
    EmpiricalCount {
        per_layer,
        non_layer,
        total,
    }
}

/// Formula vs enumeration. Returns the parity flag and, when parity fails
/// or the comparison needs qualification, a note.
pub fn parity(technique: Technique, formula: usize, count: &EmpiricalCount, hp: &PeftHyperparams) -> (bool, String) {
    match technique {
        Technique::PromptTuning => (
            count.per_layer.is_empty() && count.non_layer == formula,
            "single insertion at the embedding layer; compared against the non-layer count".into(),
        ),
        Technique::Compacters => (
            false,
            format!(
                "tabulated 2(2(d_h+d_m)) omits the Kronecker order N={} and factor shapes; enumerated count is authoritative",
                hp.kron_order
            ),
        ),
        _ => {
            let ok = !count.per_layer.is_empty() && count.per_layer.values().all(|&c| c == formula);
            let note = match technique {
                Technique::TinyAttention if hp.tiny_dim != 1 => {
                    format!("tabulated 4·d_m assumes d_t=1; this module has d_t={}", hp.tiny_dim)
                }
                Technique::Adapters if hp.adapter_biases => "bias terms are not part of the tabulated count".into(),
                Technique::PrefixTuning => {
                    "embedding-layer virtual tokens are reported as a non-layer insertion".into()
                }
                _ if !ok => "enumerated count differs from the tabulated formula".into(),
                _ => String::new(),
            };
            (ok, note)
        }
    }
}

/// PEFT checkpoint bytes over base checkpoint bytes.
pub fn storage_ratio(base: &BaseModel, module: &dyn PeftModule) -> f64 {
    store::peft_checkpoint(module).encoded_len() as f64 / store::base_checkpoint(base).encoded_len() as f64
}

/// Ratio for the control that stores a complete model copy per task.
pub fn control_storage_ratio(base: &BaseModel) -> f64 {
    store::full_copy_checkpoint(base).encoded_len() as f64 / store::base_checkpoint(base).encoded_len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub technique: Technique,
    pub complexity: ComplexityClass,
    pub formula_count: usize,
    pub empirical: EmpiricalCount,
    /// Size of the stored payload; prefixes are stored in exported form.
    pub checkpoint_bytes: usize,
    pub storage_ratio: f64,
    pub parity: bool,
    pub note: String,
    pub descriptor_summary: String,
}

pub fn efficiency_report(
    technique: Technique,
    hp: &PeftHyperparams,
    base: &BaseModel,
) -> Result<EfficiencyReport, AnalyzerError> {
    let cfg = base.config();
    let module = peft::build(technique, hp, cfg)?;
    let empirical = empirical_param_count(module.as_ref());
    let formula = tabulated_param_count(technique, hp, cfg);
    let (parity, note) = parity(technique, formula, &empirical, hp);
    let stored = module.exported();
    Ok(EfficiencyReport {
        technique,
        complexity: complexity_class(technique),
        formula_count: formula,
        empirical,
        checkpoint_bytes: store::peft_checkpoint(stored.as_ref()).encoded_len(),
        storage_ratio: storage_ratio(base, stored.as_ref()),
        parity,
        note,
        descriptor_summary: module.descriptor().summary(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub base_config: BaseConfig,
    pub hyperparams: PeftHyperparams,
    pub base_checkpoint_bytes: usize,
    pub rows: Vec<EfficiencyReport>,
}

const COLUMNS: [&str; 11] = [
    "technique",
    "complexity",
    "formula_per_layer",
    "empirical_per_layer",
    "non_layer",
    "empirical_total",
    "checkpoint_bytes",
    "storage_ratio",
    "parity",
    "note",
    "descriptor",
];

/// One row per technique, in input order.
pub fn comparison_report(
    techniques: &[Technique],
    hp: &PeftHyperparams,
    base: &BaseConfig,
) -> Result<ComparisonReport, AnalyzerError> {
    if techniques.is_empty() {
        return Err(AnalyzerError::EmptyList);
    }
    let model = BaseModel::build(base.clone(), 0).map_err(PeftError::from)?;
    let rows = techniques
        .iter()
        .map(|&t| efficiency_report(t, hp, &model))
        .collect::<Result<_, _>>()?;
    Ok(ComparisonReport {
        base_config: base.clone(),
        hyperparams: hp.clone(),
        base_checkpoint_bytes: store::base_checkpoint(&model).encoded_len(),
        rows,
    })
}

impl ComparisonReport {
    fn cells(&self) -> Vec<[String; 11]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.technique.label().to_string(),
                    r.complexity.to_string(),
                    r.formula_count.to_string(),
                    r.empirical.first_layer().to_string(),
                    r.empirical.non_layer.to_string(),
                    r.empirical.total.to_string(),
                    r.checkpoint_bytes.to_string(),
                    format!("{:.6}", r.storage_ratio),
                    r.parity.to_string(),
                    r.note.clone(),
                    r.descriptor_summary.clone(),
                ]
            })
            .collect()
    }

    /// `key=value` lines describing the inputs, each prefixed by `# `.
    pub fn header_block(&self) -> String {
        format!(
            "# base_config={}\n# hyperparams={}\n# base_checkpoint_bytes={}\n",
            self.base_config.canonical_text(),
            self.hyperparams.canonical_text(),
            self.base_checkpoint_bytes
        )
    }

    pub fn to_csv(&self) -> Result<String, AnalyzerError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| AnalyzerError::Csv(e.to_string());
        w.write_record(COLUMNS).map_err(err)?;
        for row in self.cells() {
            w.write_record(&row).map_err(err)?;
        }
        let body = w.into_inner().map_err(|e| AnalyzerError::Csv(e.to_string()))?;
        Ok(self.header_block() + &String::from_utf8(body).expect("CSV of UTF-8 cells"))
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut rows = vec![COLUMNS.map(String::from)];
        rows.extend(self.cells());
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = self.header_block();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

//! Structural typology of PEFT techniques.
//!
//! A [`PeftDescriptor`] records nine structural properties of a technique:
//! intra-connectivity, inter-connectivity, parameters adapted, parameter
//! sharing, input type, insertion form, number of insertions, integration
//! form and workspace. The [`Registry`] holds the reference descriptor for
//! each of the seven supported techniques and is loaded from the
//! line-oriented text in `registry.txt`.
//!
//! Compacters are recorded with `parameters_adapted=addition` even though
//! the module is built by reparameterising adapter weights as Kronecker
//! sums; the registry keeps the reference row.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TypologyError {
    #[error("unknown technique `{name}`; known techniques: {}", known.join(", "))]
    UnknownTechnique { name: String, known: Vec<String> },
    #[error("registry parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid value `{value}` for {field}")]
    InvalidValue { field: &'static str, value: String },
}

macro_rules! enumerants {
    ($(#[$meta:meta])* $name:ident, $field:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = TypologyError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(TypologyError::InvalidValue {
                        field: $field,
                        value: other.to_string(),
                    }),
                }
            }
        }
    };
}

enumerants!(
    /// Connectivity among the neurons inside the module's own layers.
    IntraConnectivity, "intra_connectivity" {
        DenseEmbedding => "dense:embedding",
        DenseNonlinearMlp => "dense:nonlinear-mlp",
        DenseLinearMlp => "dense:linear-mlp",
        DenseSelfAttention => "dense:self-attention",
        NoneParameterVector => "none:parameter-vector",
        Sparse => "sparse",
    }
);

enumerants!(
    /// How the module connects to the base transformer.
    InterConnectivity, "inter_connectivity" {
        FixedDense => "fixed:dense",
        FixedSparse => "fixed:sparse",
        Dynamic => "dynamic",
    }
);

enumerants!(
    ParametersAdapted, "parameters_adapted" {
        Addition => "addition",
        Reparameterisation => "reparameterisation",
    }
);

enumerants!(
    /// `Tied` is a legal value with no exemplar among the seven techniques.
    ParameterSharing, "parameter_sharing" {
        Shared => "shared",
        Tied => "tied",
        None => "none",
    }
);

enumerants!(
    InputType, "input_type" {
        Hidden => "hidden",
        Data => "data",
        Weights => "weights",
    }
);

enumerants!(
    InsertionForm, "insertion_form" {
        Sequential => "sequential",
        Parallel => "parallel",
    }
);

enumerants!(
    Insertions, "insertions" {
        OneLayer => "one-layer",
        AllLayers => "all-layers",
    }
);

enumerants!(
    /// Integration form as a typology label; the runtime form with its
    /// coefficient is [`crate::peft::IntegrationForm`].
    IntegrationKind, "integration_form" {
        Concatenation => "concatenation",
        ScaledAddition => "scaled-addition",
        DirectAddition => "direct-addition",
        GatedAddition => "gated-addition",
        Rescaling => "rescaling",
    }
);

enumerants!(
    /// Base-model component a module exchanges information with.
    Workspace, "workspace" {
        EmbeddingLayer => "embedding-layer",
        AttentionKeysValues => "attention-keys-values",
        AttentionQueriesValues => "attention-queries-values",
        AttentionLayer => "attention-layer",
        FfnLayer => "ffn-layer",
        FfnIntermediate => "ffn-intermediate",
    }
);

/// The seven techniques with a reference registry row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Technique {
    PromptTuning,
    PrefixTuning,
    LoRA,
    Adapters,
    TinyAttention,
    Compacters,
    IA3,
}

impl Technique {
    pub const ALL: [Technique; 7] = [
        Technique::PromptTuning,
        Technique::PrefixTuning,
        Technique::LoRA,
        Technique::Adapters,
        Technique::TinyAttention,
        Technique::Compacters,
        Technique::IA3,
    ];

    /// Registry name.
    pub fn label(self) -> &'static str {
        match self {
            Technique::PromptTuning => "Prompt tuning",
            Technique::PrefixTuning => "Prefix tuning",
            Technique::LoRA => "LoRA",
            Technique::Adapters => "Adapters",
            Technique::TinyAttention => "Tiny-Att. Ad.",
            Technique::Compacters => "Compacters",
            Technique::IA3 => "(IA)3",
        }
    }

    /// Command-line name.
    pub fn slug(self) -> &'static str {
        match self {
            Technique::PromptTuning => "prompt",
            Technique::PrefixTuning => "prefix",
            Technique::LoRA => "lora",
            Technique::Adapters => "adapter",
            Technique::TinyAttention => "tiny-attention",
            Technique::Compacters => "compacter",
            Technique::IA3 => "ia3",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Technique::PromptTuning => &["prompt-tuning", "prompt_tuning", "pt"],
            Technique::PrefixTuning => &["prefix-tuning", "prefix_tuning", "pf"],
            Technique::LoRA => &[],
            Technique::Adapters => &["adapters"],
            Technique::TinyAttention => &["tiny", "tiny-attention-adapter", "tiny-attention adapters"],
            Technique::Compacters => &["compacters"],
            Technique::IA3 => &["(ia)³", "ia³"],
        }
    }

    pub fn known_names() -> Vec<String> {
        Technique::ALL.iter().map(|t| t.label().to_string()).collect()
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Technique {
    type Err = TypologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_lowercase();
        Technique::ALL
            .into_iter()
            .find(|t| {
                t.label().to_lowercase() == wanted || t.slug() == wanted || t.aliases().iter().any(|a| *a == wanted)
            })
            .ok_or_else(|| TypologyError::UnknownTechnique {
                name: s.to_string(),
                known: Technique::known_names(),
            })
    }
}

/// Nine-property structural record of one technique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeftDescriptor {
    pub technique: String,
    pub intra_connectivity: IntraConnectivity,
    pub inter_connectivity: InterConnectivity,
    pub parameters_adapted: ParametersAdapted,
    pub parameter_sharing: ParameterSharing,
    pub input_type: InputType,
    pub insertion_form: InsertionForm,
    pub insertions: Insertions,
    pub integration_form: BTreeSet<IntegrationKind>,
    pub workspace: BTreeSet<Workspace>,
}

/// The nine typology properties, in registry order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Property {
    IntraConnectivity,
    InterConnectivity,
    ParametersAdapted,
    ParameterSharing,
    InputType,
    InsertionForm,
    Insertions,
    IntegrationForm,
    Workspace,
}

impl Property {
    pub const ALL: [Property; 9] = [
        Property::IntraConnectivity,
        Property::InterConnectivity,
        Property::ParametersAdapted,
        Property::ParameterSharing,
        Property::InputType,
        Property::InsertionForm,
        Property::Insertions,
        Property::IntegrationForm,
        Property::Workspace,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Property::IntraConnectivity => "intra_connectivity",
            Property::InterConnectivity => "inter_connectivity",
            Property::ParametersAdapted => "parameters_adapted",
            Property::ParameterSharing => "parameter_sharing",
            Property::InputType => "input_type",
            Property::InsertionForm => "insertion_form",
            Property::Insertions => "insertions",
            Property::IntegrationForm => "integration_form",
            Property::Workspace => "workspace",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

fn join_set<T: fmt::Display>(set: &BTreeSet<T>) -> String {
    set.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl PeftDescriptor {
    /// Text form of one property's value.
    pub fn value_text(&self, p: Property) -> String {
        match p {
            Property::IntraConnectivity => self.intra_connectivity.to_string(),
            Property::InterConnectivity => self.inter_connectivity.to_string(),
            Property::ParametersAdapted => self.parameters_adapted.to_string(),
            Property::ParameterSharing => self.parameter_sharing.to_string(),
            Property::InputType => self.input_type.to_string(),
            Property::InsertionForm => self.insertion_form.to_string(),
            Property::Insertions => self.insertions.to_string(),
            Property::IntegrationForm => join_set(&self.integration_form),
            Property::Workspace => join_set(&self.workspace),
        }
    }

    /// One registry record: `technique=...;key=value;...;`
    pub fn to_record(&self) -> String {
        let mut out = format!("technique={};", self.technique);
        for p in Property::ALL {
            out.push_str(p.key());
            out.push('=');
            out.push_str(&self.value_text(p));
            out.push(';');
        }
        out
    }

    pub fn parse_record(line: &str) -> Result<Self, TypologyError> {
        let mut technique = None;
        let mut fields: Vec<Option<String>> = vec![None; Property::ALL.len()];
        for pair in line.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair.split_once('=').ok_or_else(|| TypologyError::Parse {
                line: 0,
                reason: format!("expected key=value, got `{pair}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "technique" {
                technique = Some(value.to_string());
                continue;
            }
            let idx = Property::ALL
                .iter()
                .position(|p| p.key() == key)
                .ok_or_else(|| TypologyError::Parse {
                    line: 0,
                    reason: format!("unknown field `{key}`"),
                })?;
            if fields[idx].replace(value.to_string()).is_some() {
                return Err(TypologyError::Parse {
                    line: 0,
                    reason: format!("duplicate field `{key}`"),
                });
            }
        }
        let technique = technique.ok_or_else(|| TypologyError::Parse {
            line: 0,
            reason: "missing technique".into(),
        })?;
        let get = |p: Property| -> Result<&str, TypologyError> {
            fields[p as usize].as_deref().ok_or_else(|| TypologyError::Parse {
                line: 0,
                reason: format!("missing field `{}`", p.key()),
            })
        };
        let set = |p: Property| -> Result<Vec<&str>, TypologyError> {
            let items: Vec<&str> = get(p)?.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(TypologyError::Parse {
                    line: 0,
                    reason: format!("`{}` must not be empty", p.key()),
                });
            }
            Ok(items)
        };
        Ok(PeftDescriptor {
            technique,
            intra_connectivity: get(Property::IntraConnectivity)?.parse()?,
            inter_connectivity: get(Property::InterConnectivity)?.parse()?,
            parameters_adapted: get(Property::ParametersAdapted)?.parse()?,
            parameter_sharing: get(Property::ParameterSharing)?.parse()?,
            input_type: get(Property::InputType)?.parse()?,
            insertion_form: get(Property::InsertionForm)?.parse()?,
            insertions: get(Property::Insertions)?.parse()?,
            integration_form: set(Property::IntegrationForm)?
                .into_iter()
                .map(str::parse)
                .collect::<Result<_, _>>()?,
            workspace: set(Property::Workspace)?
                .into_iter()
                .map(str::parse)
                .collect::<Result<_, _>>()?,
        })
    }

    /// Short one-line summary used in comparison reports.
    pub fn summary(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.insertion_form,
            self.insertions,
            join_set(&self.integration_form),
            join_set(&self.workspace)
        )
    }
}

/// One differing property between two descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDiff {
    pub property: Property,
    pub left: String,
    pub right: String,
}

impl fmt::Display for FieldDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} vs {}", self.property, self.left, self.right)
    }
}

/// Per-property comparison of two descriptors (the technique name is not a
/// property and is ignored). Empty iff all nine properties agree.
pub fn descriptor_diff(a: &PeftDescriptor, b: &PeftDescriptor) -> Vec<FieldDiff> {
    Property::ALL
        .into_iter()
        .filter_map(|p| {
            let (left, right) = (a.value_text(p), b.value_text(p));
            (left != right).then_some(FieldDiff {
                property: p,
                left,
                right,
            })
        })
        .collect()
}

const BUILTIN: &str = include_str!("registry.txt");

/// Reference descriptors keyed by technique name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    entries: Vec<PeftDescriptor>,
}

impl Registry {
    /// The seven reference rows.
    pub fn builtin() -> &'static Registry {
        static REGISTRY: OnceLock<Registry> = OnceLock::new();
        REGISTRY.get_or_init(|| {
            let r = Registry::parse(BUILTIN).expect("builtin registry parses");
            assert_eq!(r.len(), 7, "builtin registry must have seven rows");
            r
        })
    }

    pub fn parse(text: &str) -> Result<Self, TypologyError> {
        let mut entries: Vec<PeftDescriptor> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let d = PeftDescriptor::parse_record(line).map_err(|e| match e {
                TypologyError::Parse { reason, .. } => TypologyError::Parse { line: i + 1, reason },
                other => TypologyError::Parse {
                    line: i + 1,
                    reason: other.to_string(),
                },
            })?;
            if entries.iter().any(|e| e.technique == d.technique) {
                return Err(TypologyError::Parse {
                    line: i + 1,
                    reason: format!("duplicate technique `{}`", d.technique),
                });
            }
            entries.push(d);
        }
        Ok(Registry { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_record());
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PeftDescriptor] {
        &self.entries
    }

    /// Finds a row by registry name, command-line name or alias.
    pub fn lookup(&self, name: &str) -> Result<&PeftDescriptor, TypologyError> {
        let unknown = || TypologyError::UnknownTechnique {
            name: name.to_string(),
            known: self.entries.iter().map(|e| e.technique.clone()).collect(),
        };
        if let Some(e) = self.entries.iter().find(|e| e.technique == name) {
            return Ok(e);
        }
        let label = name.parse::<Technique>().map_err(|_| unknown())?.label();
        self.entries.iter().find(|e| e.technique == label).ok_or_else(unknown)
    }

    /// Mismatches between a self-declared descriptor and the reference row
    /// for its technique.
    pub fn validate(&self, declared: &PeftDescriptor) -> Result<Vec<FieldDiff>, TypologyError> {
        let reference = self.lookup(&declared.technique)?;
        Ok(descriptor_diff(declared, reference))
    }
}

/// Looks a technique up in the builtin registry.
pub fn registry_lookup(name: &str) -> Result<&'static PeftDescriptor, TypologyError> {
    Registry::builtin().lookup(name)
}

/// Validates a self-declared descriptor against the builtin registry.
pub fn validate_descriptor(declared: &PeftDescriptor) -> Result<Vec<FieldDiff>, TypologyError> {
    Registry::builtin().validate(declared)
}

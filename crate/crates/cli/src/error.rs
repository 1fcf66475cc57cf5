use peft_ref::analyzer::AnalyzerError;
use peft_ref::model::ModelError;
use peft_ref::peft::PeftError;
use peft_ref::store::StoreError;
use peft_ref::trainer::TrainError;

/// Failure classes, one exit code each.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Input(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PeftError> for CliError {
    fn from(e: PeftError) -> Self {
        match e {
            PeftError::Model(m) => m.into(),
            PeftError::Typology(_) => CliError::Usage(e.to_string()),
            PeftError::Config(_) | PeftError::Composition(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } | TrainError::BaseModified => CliError::Numerical(e.to_string()),
            TrainError::Peft(p) => p.into(),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Integrity(_) | StoreError::Format(_) => CliError::Io(e.to_string()),
            StoreError::Compatibility { .. } | StoreError::Typology(_) => CliError::Config(e.to_string()),
            StoreError::Peft(p) => p.into(),
            StoreError::Model(m) => m.into(),
        }
    }
}

impl From<AnalyzerError> for CliError {
    fn from(e: AnalyzerError) -> Self {
        match e {
            AnalyzerError::EmptyList => CliError::Usage(e.to_string()),
            AnalyzerError::Peft(p) => p.into(),
            AnalyzerError::Csv(_) => CliError::Io(e.to_string()),
        }
    }
}

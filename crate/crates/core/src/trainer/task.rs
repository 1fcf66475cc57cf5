use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Predict each input token at its own position.
    Copy,
    /// Label each token with its class `id % 2`.
    Classification,
    /// Label the sequence with the parity of its designated tokens
    /// (ids below `vocab / 2`), read at the final position.
    Parity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Classification, TaskKind::Parity];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Classification => "classification",
            TaskKind::Parity => "parity",
        }
    }

    fn min_vocab(self) -> usize {
        match self {
            TaskKind::Copy | TaskKind::Classification => 2,
            TaskKind::Parity => 4,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown task `{s}`; expected copy, classification or parity")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dataset_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn copy(vocab_size: usize, seq_len: usize, dataset_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size,
            seq_len,
            dataset_size,
            seed,
        }
    }

    pub fn canonical_text(&self) -> String {
        format!(
            "task={};vocab={};seq_len={};size={};data_seed={};",
            self.kind, self.vocab_size, self.seq_len, self.dataset_size, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    PerToken(Vec<usize>),
    /// One label scored at the last position.
    Final(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

pub fn make_task(spec: &TaskSpec) -> Result<Vec<Example>, TrainError> {
    if spec.vocab_size < spec.kind.min_vocab() {
        return Err(TrainError::Config(format!(
            "{} task needs a vocabulary of at least {}, got {}",
            spec.kind,
            spec.kind.min_vocab(),
            spec.vocab_size
        )));
    }
    if spec.seq_len == 0 || spec.dataset_size == 0 {
        return Err(TrainError::Config(
            "sequence length and dataset size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.dataset_size)
        .map(|_| {
            let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let target = match spec.kind {
                TaskKind::Copy => Target::PerToken(tokens.clone()),
                TaskKind::Classification => Target::PerToken(tokens.iter().map(|t| t % 2).collect()),
                TaskKind::Parity => {
                    let half = spec.vocab_size / 2;
                    Target::Final(tokens.iter().filter(|&&t| t < half).count() % 2)
                }
            };
            Example { tokens, target }
        })
        .collect())
}

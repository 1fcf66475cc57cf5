//! Synthetic tasks and a training harness that updates PEFT tensors only.
//!
//! Runs are strictly sequential and fully determined by the model, the
//! task, the config and its seed. Sweeps run independent runs in parallel,
//! each on its own clone of the composed model.

mod adam;
mod gradcheck;
mod reference;
mod sweep;
mod task;

pub use adam::Adam;
pub use gradcheck::{gradcheck_module, gradcheck_technique, mini_config, randomize_params, GradcheckReport};
pub use reference::{reference_base_config, reference_hyperparams, reference_task, reference_train_config};
pub use sweep::{
    convergence_sweep, stability_csv, stability_report, steps_to_fraction, Curve, StabilityRow, SweepResult,
    SweepSummary,
};
pub use task::{make_task, Example, Target, TaskKind, TaskSpec};

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::Fnv64;
use crate::peft::{ComposedModel, PeftError, PeftModule};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize, record: Box<RunRecord> },
    #[error("base parameters changed during training")]
    BaseModified,
    #[error(transparent)]
    Peft(#[from] PeftError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Peft(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed for batch sampling.
    pub seed: u64,
    /// Evaluate on the full dataset every this many steps; 0 disables
    /// intermediate evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 8,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves every tensor unchanged.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return Err(TrainError::Config(
                "moment coefficients must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        format!(
            "steps={};batch={};lr={};beta1={};beta2={};epsilon={};seed={};eval_every={};",
            self.steps,
            self.batch_size,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.seed,
            self.eval_every
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eval {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub technique: String,
    pub trainable_params: usize,
    /// Training-batch loss before each update.
    pub losses: Vec<f64>,
    /// Full-dataset evaluations; the first is at step 0, the last after
    /// the final update.
    pub evals: Vec<Eval>,
    pub param_hash: u64,
    pub base_hash_before: u64,
    pub base_hash_after: u64,
}

impl RunRecord {
    pub fn initial_eval(&self) -> &Eval {
        &self.evals[0]
    }

    pub fn final_eval(&self) -> &Eval {
        self.evals.last().expect("at least one evaluation")
    }
}

/// Order-stable hash of a module's tensor names and bit patterns.
pub fn module_hash(module: &dyn PeftModule) -> u64 {
    let mut h = Fnv64::new();
    for p in module.params().iter() {
        h.write(p.name.as_bytes());
        h.write_f64s(p.tensor.data());
    }
    h.finish()
}

fn check_vocab(model: &ComposedModel, data: &[Example]) -> Result<(), TrainError> {
    let vocab = model.base().config().vocab_size;
    let bad = data.iter().any(|e| {
        e.tokens.iter().any(|&t| t >= vocab)
            || match &e.target {
                Target::PerToken(ts) => ts.len() != e.tokens.len() || ts.iter().any(|&t| t >= vocab),
                Target::Final(t) => *t >= vocab,
            }
    });
    if bad {
        return Err(TrainError::Config(format!(
            "task does not fit the model's vocabulary of {vocab}"
        )));
    }
    let len = data.first().map_or(0, |e| e.tokens.len());
    if data.is_empty() || data.iter().any(|e| e.tokens.len() != len) {
        return Err(TrainError::Config(
            "dataset must be non-empty with equal-length sequences".into(),
        ));
    }
    Ok(())
}

/// Scored logits `[m, V]` and their targets for a batch.
fn scored(tape: &Tape, model: &ComposedModel, batch: &[&Example]) -> Result<(Var, Vec<usize>), TrainError> {
    let tokens: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let logits = model.forward(tape, &tokens)?;
    let s = tape.shape(logits);
    let (b, t, v) = (s[0], s[1], s[2]);
    match &batch[0].target {
        Target::PerToken(_) => {
            let targets = batch
                .iter()
                .flat_map(|e| match &e.target {
                    Target::PerToken(ts) => ts.clone(),
                    Target::Final(x) => vec![*x],
                })
                .collect();
            Ok((tape.reshape(logits, &[b * t, v])?, targets))
        }
        Target::Final(_) => {
            let last = tape.slice(logits, 1, t - 1, t)?;
            let targets = batch
                .iter()
                .map(|e| match &e.target {
                    Target::Final(x) => *x,
                    Target::PerToken(ts) => ts[t - 1],
                })
                .collect();
            Ok((tape.reshape(last, &[b, v])?, targets))
        }
    }
}

/// Mean cross-entropy of a batch, recorded on `tape`.
pub fn batch_loss(tape: &Tape, model: &ComposedModel, batch: &[&Example]) -> Result<Var, TrainError> {
    let (logits, targets) = scored(tape, model, batch)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Loss and accuracy over `data`.
pub fn evaluate(model: &ComposedModel, data: &[Example]) -> Result<(f64, f64), TrainError> {
    let mut total_loss = 0.0;
    let (mut correct, mut count) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let tape = Tape::new();
        let (logits, targets) = scored(&tape, model, &refs)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        total_loss += tape.value(loss).item() * targets.len() as f64;
        let l = tape.value(logits);
        let v = l.shape()[1];
        for (row, &t) in l.data().chunks(v).zip(&targets) {
            let argmax = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                )
                .0;
            correct += usize::from(argmax == t);
        }
        count += targets.len();
    }
    Ok((total_loss / count as f64, correct as f64 / count as f64))
}

/// Trains the attached module on `data`. Only module tensors change.
pub fn train(model: &mut ComposedModel, data: &[Example], cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    check_vocab(model, data)?;
    let technique = match model.module() {
        Some(m) => m.descriptor().technique,
        None => return Err(TrainError::Config("no PEFT module attached".into())),
    };
    let base_hash_before = model.base().parameter_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut losses = Vec::with_capacity(cfg.steps);
    let eval_at = |step: usize, model: &ComposedModel| -> Result<Eval, TrainError> {
        let (loss, accuracy) = evaluate(model, data)?;
        Ok(Eval { step, loss, accuracy })
    };
    let mut evals = vec![eval_at(0, model)?];
    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let tape = Tape::new();
        let loss = batch_loss(&tape, model, &batch)?;
        let value = tape.value(loss).item();
        losses.push(value);
        if !value.is_finite() {
            let module = model.module().expect("checked above");
            let record = RunRecord {
                technique,
                trainable_params: module.params().total(),
                losses,
                evals,
                param_hash: module_hash(module),
                base_hash_before,
                base_hash_after: model.base().parameter_hash(),
            };
            return Err(TrainError::Diverged {
                step,
                record: Box::new(record),
            });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let module = model.module_mut().expect("checked above");
        adam.step(module.params_mut(), &grads);
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            evals.push(eval_at(done, model)?);
        }
    }
    evals.push(eval_at(cfg.steps, model)?);
    let base_hash_after = model.base().parameter_hash();
    if base_hash_after != base_hash_before {
        return Err(TrainError::BaseModified);
    }
    let module = model.module().expect("checked above");
    Ok(RunRecord {
        technique,
        trainable_params: module.params().total(),
        losses,
        evals,
        param_hash: module_hash(module),
        base_hash_before,
        base_hash_after,
    })
}

/// CSV of one run: `key=value` header lines prefixed by `# `, then
/// `step,loss` rows and `eval_step,eval_loss,eval_accuracy` rows.
pub fn run_csv(record: &RunRecord, header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "# technique={}", record.technique);
    let _ = writeln!(out, "# trainable_params={}", record.trainable_params);
    let _ = writeln!(out, "# param_hash={:016x}", record.param_hash);
    let _ = writeln!(out, "# base_hash_before={:016x}", record.base_hash_before);
    let _ = writeln!(out, "# base_hash_after={:016x}", record.base_hash_after);
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record(["kind", "step", "loss", "accuracy"]);
    for (i, l) in record.losses.iter().enumerate() {
        let _ = w.write_record(["train".to_string(), i.to_string(), format!("{l:.17e}"), String::new()]);
    }
    for e in &record.evals {
        let _ = w.write_record([
            "eval".to_string(),
            e.step.to_string(),
            format!("{:.17e}", e.loss),
            format!("{:.6}", e.accuracy),
        ]);
    }
    out + &String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8 cells")
}

//! peft-ref: build bases, compare techniques, train and verify modules.
//!
//! Every report starts with `# key=value` lines holding the resolved
//! config, so any output file is enough to rerun the command that made it.
//!
//! Exit codes: 0 ok, 1 usage, 2 config, 3 numerical, 4 I/O.

mod error;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use peft_ref::analyzer::comparison_report;
use peft_ref::model::{BaseConfig, BaseModel};
use peft_ref::peft::{self, PeftHyperparams};
use peft_ref::store;
use peft_ref::trainer::{self, TaskKind, TaskSpec, TrainConfig};
use peft_ref::typology::{Registry, Technique};

use error::CliError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "peft-ref",
    version,
    about = "Reference PEFT modules on a desk-scale frozen transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frozen base model and write its checkpoint.
    InitBase {
        #[command(flatten)]
        base: BaseArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts, complexity classes and storage ratios.
    Analyze {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        technique: TechniqueArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one module and emit its loss curve as CSV.
    Train {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        technique: TechniqueArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        task: TaskArgs,
        /// Also save the trained module here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every technique for every seed; emit curves and a summary.
    Sweep {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        technique: TechniqueArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Compare analytic and finite-difference gradients on a mini config.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "all")]
        technique: Vec<String>,
        /// Seed for the randomized module tensors.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build (and optionally train) a module and write its checkpoint.
    Export {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        technique: TechniqueArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Check every module's declared descriptor against the registry.
    ValidateTypology {
        /// Registry text file; the built-in table by default.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Args, Debug)]
struct BaseArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Defaults to 4 × dim.
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    /// Base initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load the base from a checkpoint instead of building it; the shape
    /// flags are then ignored.
    #[arg(long, value_name = "PATH")]
    base_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TechniqueArgs {
    /// Comma-separated technique names, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    technique: Vec<String>,
    #[arg(long, default_value_t = 8)]
    n_tokens: usize,
    #[arg(long, default_value_t = 4)]
    bottleneck: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 2)]
    kron_order: usize,
    #[arg(long, default_value_t = 1)]
    tiny_dim: usize,
    /// LoRA scale.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Training steps; 100 for train and sweep, 0 for export.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Comma-separated run seeds; each drives module init and batching.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Output file (train, export) or directory (sweep).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TaskArgs {
    #[arg(long, default_value = "copy")]
    task: String,
    #[arg(long, default_value_t = 6)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    examples: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

/// Ordered `key=value` pairs echoed at the top of every output.
type Header = Vec<(String, String)>;

fn header_text(header: &Header) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

impl BaseArgs {
    fn config(&self) -> Result<BaseConfig, CliError> {
        let mut cfg = BaseConfig::new(self.layers, self.dim, self.heads, self.vocab);
        if let Some(f) = self.ffn {
            cfg.ffn_dim = f;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn model(&self) -> Result<BaseModel, CliError> {
        match &self.base_file {
            Some(path) => Ok(store::load_base(path)?),
            None => Ok(BaseModel::build(self.config()?, self.seed)?),
        }
    }

    fn header(&self, model: &BaseModel) -> Header {
        let mut h = vec![kv("base_config", model.config().canonical_text())];
        match &self.base_file {
            Some(p) => h.push(kv("base_file", p.display())),
            None => h.push(kv("base_seed", self.seed)),
        }
        h.push(kv("base_fingerprint", format!("{:016x}", model.config().fingerprint())));
        h.push(kv("base_hash", format!("{:016x}", model.parameter_hash())));
        h
    }
}

fn parse_techniques(names: &[String]) -> Result<Vec<Technique>, CliError> {
    if names.iter().any(|n| n == "all") {
        if names.len() > 1 {
            return Err(CliError::Usage("`all` cannot be combined with other techniques".into()));
        }
        return Ok(Technique::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let t: Technique = n
            .parse()
            .map_err(|e: peft_ref::typology::TypologyError| CliError::Usage(e.to_string()))?;
        if out.contains(&t) {
            return Err(CliError::Usage(format!("technique `{n}` given twice")));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(CliError::Usage("no technique given".into()));
    }
    Ok(out)
}

impl TechniqueArgs {
    fn techniques(&self) -> Result<Vec<Technique>, CliError> {
        parse_techniques(&self.technique)
    }

    fn single(&self) -> Result<Technique, CliError> {
        match self.techniques()?.as_slice() {
            [t] if !self.technique.iter().any(|n| n == "all") => Ok(*t),
            _ => Err(CliError::Usage("this command takes exactly one --technique".into())),
        }
    }

    fn hyperparams(&self, seed: u64) -> PeftHyperparams {
        PeftHyperparams {
            n_virtual_tokens: self.n_tokens,
            bottleneck_dim: self.bottleneck,
            lora_rank: self.rank,
            lora_scale: self.scale,
            kron_order: self.kron_order,
            tiny_dim: self.tiny_dim,
            seed,
            ..PeftHyperparams::default()
        }
    }
}

impl RunArgs {
    fn config(&self, default_steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps.unwrap_or(default_steps),
            batch_size: self.batch,
            learning_rate: self.lr,
            seed,
            ..TrainConfig::default()
        }
    }

    fn single_seed(&self) -> Result<u64, CliError> {
        match self.seeds.as_slice() {
            [s] => Ok(*s),
            _ => Err(CliError::Usage("this command takes exactly one seed".into())),
        }
    }
}

impl TaskArgs {
    fn spec(&self, vocab: usize) -> Result<TaskSpec, CliError> {
        let kind: TaskKind = self
            .task
            .parse()
            .map_err(|e: trainer::TrainError| CliError::Usage(e.to_string()))?;
        Ok(TaskSpec {
            kind,
            vocab_size: vocab,
            seq_len: self.seq_len,
            dataset_size: self.examples,
            seed: self.data_seed,
        })
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => Ok(store::write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_init_base(base: &BaseArgs, out: &Path) -> Result<(), CliError> {
    let model = BaseModel::build(base.config()?, base.seed)?;
    let bytes = store::save_base(&model, out)?;
    let total: usize = model.named_parameters().iter().map(|(_, t)| t.numel()).sum();
    print!("{}", header_text(&base.header(&model)));
    println!("parameters={total}");
    println!("fingerprint={:016x}", model.config().fingerprint());
    println!("bytes={bytes}");
    println!("path={}", out.display());
    Ok(())
}

fn cmd_analyze(base: &BaseArgs, tech: &TechniqueArgs, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    if base.base_file.is_some() {
        return Err(CliError::Usage(
            "analyze builds its own base; use the shape flags".into(),
        ));
    }
    let report = comparison_report(&tech.techniques()?, &tech.hyperparams(0), &base.config()?)?;
    let text = match format {
        Format::Csv => report.to_csv()?,
        Format::Text => report.to_text(),
    };
    emit(&text, out)
}

fn train_header(
    base: &BaseArgs,
    model: &BaseModel,
    techniques: &[Technique],
    hp: &PeftHyperparams,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Header {
    let mut h = base.header(model);
    let names: Vec<&str> = techniques.iter().map(|t| t.slug()).collect();
    h.push(kv("techniques", names.join(",")));
    h.push(kv("hyperparams", hp.canonical_text()));
    h.push(kv("task", task.canonical_text()));
    h.push(kv("train", cfg.canonical_text()));
    h
}

fn cmd_train(
    base: &BaseArgs,
    tech: &TechniqueArgs,
    run: &RunArgs,
    task: &TaskArgs,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let technique = tech.single()?;
    let seed = run.single_seed()?;
    let model = Arc::new(base.model()?);
    let spec = task.spec(model.config().vocab_size)?;
    let hp = tech.hyperparams(seed);
    let cfg = run.config(100, seed);
    let header = train_header(base, &model, &[technique], &hp, &spec, &cfg);
    let data = trainer::make_task(&spec)?;
    let mut composed = peft::attach(model.clone(), peft::build(technique, &hp, model.config())?)?;
    let record = trainer::train(&mut composed, &data, &cfg)?;
    emit(&trainer::run_csv(&record, &header), run.out.as_deref())?;
    let (first, last) = (record.initial_eval(), record.final_eval());
    eprintln!(
        "{}: loss {:.6} -> {:.6} (ratio {:.4}), accuracy {:.4} -> {:.4}, {} trainable",
        technique.slug(),
        first.loss,
        last.loss,
        last.loss / first.loss,
        first.accuracy,
        last.accuracy,
        record.trainable_params
    );
    if let Some(path) = checkpoint {
        let module = composed.module().expect("attached above").exported();
        store::save_peft(module.as_ref(), path)?;
    }
    Ok(())
}

fn cmd_sweep(base: &BaseArgs, tech: &TechniqueArgs, run: &RunArgs, task: &TaskArgs) -> Result<(), CliError> {
    let techniques = tech.techniques()?;
    let model = Arc::new(base.model()?);
    let spec = task.spec(model.config().vocab_size)?;
    let hp = tech.hyperparams(0);
    let cfg = run.config(100, 0);
    let mut header = train_header(base, &model, &techniques, &hp, &spec, &cfg);
    let seeds: Vec<String> = run.seeds.iter().map(|s| s.to_string()).collect();
    header.push(kv("seeds", seeds.join(",")));
    let pairs: Vec<(Technique, PeftHyperparams)> = techniques.iter().map(|&t| (t, hp.clone())).collect();
    let result = trainer::convergence_sweep(model, &pairs, &spec, &cfg, &run.seeds)?;
    let summary = result.summary_csv(&header);
    match &run.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            store::write_atomic(&dir.join("curves.csv"), result.curves_csv(&header).as_bytes())?;
            store::write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
        }
        None => print!("{summary}"),
    }
    Ok(())
}

fn cmd_gradcheck(names: &[String], seed: u64) -> Result<(), CliError> {
    let techniques = parse_techniques(names)?;
    let mut out = header_text(&vec![
        kv("base_config", trainer::mini_config().canonical_text()),
        kv("seed", seed),
        kv("tolerance", GRADCHECK_TOLERANCE),
    ]);
    out.push_str("technique,tensors,max_rel_error,status\n");
    let mut failed = Vec::new();
    for t in techniques {
        let report = trainer::gradcheck_technique(t, seed)?;
        let err = report.max_error();
        let ok = err <= GRADCHECK_TOLERANCE;
        if !ok {
            failed.push(t.slug());
        }
        let _ = writeln!(
            out,
            "{},{},{:.3e},{}",
            t.slug(),
            report.errors.len(),
            err,
            if ok { "OK" } else { "FAIL" }
        );
    }
    print!("{out}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_export(base: &BaseArgs, tech: &TechniqueArgs, run: &RunArgs, task: &TaskArgs) -> Result<(), CliError> {
    let technique = tech.single()?;
    let seed = run.single_seed()?;
    let out = run
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("export needs --out".into()))?;
    let model = Arc::new(base.model()?);
    let hp = tech.hyperparams(seed);
    let cfg = run.config(0, seed);
    let mut composed = peft::attach(model.clone(), peft::build(technique, &hp, model.config())?)?;
    let mut header = base.header(&model);
    header.push(kv("technique", technique.slug()));
    header.push(kv("hyperparams", hp.canonical_text()));
    if cfg.steps > 0 {
        let spec = task.spec(model.config().vocab_size)?;
        header.push(kv("task", spec.canonical_text()));
        header.push(kv("train", cfg.canonical_text()));
        trainer::train(&mut composed, &trainer::make_task(&spec)?, &cfg)?;
    }
    let module = composed.module().expect("attached above").exported();
    let bytes = store::save_peft(module.as_ref(), out)?;
    let base_bytes = store::base_checkpoint(&model).encoded_len();
    print!("{}", header_text(&header));
    println!("variant={}", module.variant());
    println!("parameters={}", module.params().total());
    println!("bytes={bytes}");
    println!("storage_ratio={:.6}", bytes as f64 / base_bytes as f64);
    println!("param_hash={:016x}", trainer::module_hash(module.as_ref()));
    Ok(())
}

fn cmd_validate_typology(registry: Option<&Path>) -> Result<(), CliError> {
    let custom;
    let reg = match registry {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            custom = Registry::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
            &custom
        }
        None => Registry::builtin(),
    };
    let cfg = BaseConfig::new(2, 16, 2, 32);
    let mut bad = 0;
    for t in Technique::ALL {
        let module = peft::build(t, &PeftHyperparams::default(), &cfg)?;
        match reg.validate(&module.descriptor()) {
            Ok(diffs) if diffs.is_empty() => println!("OK {}", t.label()),
            Ok(diffs) => {
                bad += 1;
                let d: Vec<String> = diffs.iter().map(|d| d.to_string()).collect();
                println!("MISMATCH {}: {}", t.label(), d.join("; "));
            }
            Err(e) => {
                bad += 1;
                println!("MISSING {}: {e}", t.label());
            }
        }
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{bad} technique(s) disagree with the registry"
        )))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InitBase { base, out } => cmd_init_base(&base, &out),
        Command::Analyze {
            base,
            technique,
            format,
            out,
        } => cmd_analyze(&base, &technique, format, out.as_deref()),
        Command::Train {
            base,
            technique,
            run,
            task,
            checkpoint,
        } => cmd_train(&base, &technique, &run, &task, checkpoint.as_deref()),
        Command::Sweep {
            base,
            technique,
            run,
            task,
        } => cmd_sweep(&base, &technique, &run, &task),
        Command::Gradcheck { technique, seed } => cmd_gradcheck(&technique, seed),
        Command::Export {
            base,
            technique,
            run,
            task,
        } => cmd_export(&base, &technique, &run, &task),
        Command::ValidateTypology { registry } => cmd_validate_typology(registry.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

//! Command-line runner. Every pipeline command resolves a [`RunConfig`] from
//! an optional TOML file plus flags (flags win), validates it, loads data and
//! backends, and only then creates a fresh run directory holding
//! `config.snapshot`, `predictions.csv`, `metrics.json` and `log.txt`.
//!
//! Exit codes: 0 on success, 1 when some examples failed or the run broke
//! after starting, 2 on invalid usage.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BigramGenerator, ChoiceScorer, CountMaskedLm, Generator, LinearChoiceScorer, LinearPairClassifier, MaskedLm,
    PairClassifier, PllChoiceScorer, ServedModels, ServiceBackend, UnknownCountClassifier,
};
use crate::choice::{
    build_explanation_candidates, build_validation_choices, classify_validation, concat_pair, select_explanation,
    select_validation, ExplanationFormat,
};
use crate::corpus::{load_dataset, load_labels, load_references, load_texts, tokenize_reference, Dataset, Subtask};
use crate::error::{Error, Result};
use crate::generation::{batch_generate, write_candidates, DecodeConfig, GenerationSystem, Strategy};
use crate::metrics::{accuracy, corpus_bleu_with_ids, AccuracyReport, BleuReport};
use crate::plausibility::{choose_plausible_with, Normalization, PllOptions};
use crate::training::{
    fine_tune, hyperparameter_sweep, labeled_choice_sets, Labeled, TrainingConfig, SWEEP_LEARNING_RATES,
};

pub const OUT_ENV: &str = "COMVE_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mlm,
    Classify,
    Mc,
    Identity,
    Lm,
}

impl Method {
    fn allowed(subtask: Subtask) -> &'static [Method] {
        match subtask {
            Subtask::A => &[Method::Mlm, Method::Classify, Method::Mc],
            Subtask::B => &[Method::Mc],
            Subtask::C => &[Method::Identity, Method::Lm],
        }
    }

    fn default_for(subtask: Subtask) -> Method {
        Method::allowed(subtask)[0]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mlm => "mlm",
            Method::Classify => "classify",
            Method::Mc => "mc",
            Method::Identity => "identity",
            Method::Lm => "lm",
        })
    }
}

/// Where model probabilities come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// Count models trained on a corpus file, one text per line.
    Count(PathBuf),
    /// A model server speaking the line-delimited JSON protocol.
    Service(String),
    /// A linear model saved by `train`.
    Linear(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("count", p)) if !p.is_empty() => Ok(BackendSpec::Count(p.into())),
            Some(("service", a)) if !a.is_empty() => Ok(BackendSpec::Service(a.into())),
            Some(("linear", p)) if !p.is_empty() => Ok(BackendSpec::Linear(p.into())),
            _ => Err(Error::Config(format!(
                "backend {s:?} is not one of count:CORPUS, service:ADDR, linear:MODEL"
            ))),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Count(p) => write!(f, "count:{}", p.display()),
            BackendSpec::Service(a) => write!(f, "service:{a}"),
            BackendSpec::Linear(p) => write!(f, "linear:{}", p.display()),
        }
    }
}

/// Everything a run depends on. Written back out as `config.snapshot`, which
/// can be passed to `--config` to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub subtask: Option<Subtask>,
    pub method: Option<Method>,
    pub normalization: Normalization,
    pub content_only: bool,
    /// Subtask B: separator token between statement and reason.
    pub separator: bool,
    pub backend: Option<String>,
    /// Smoothing for count backends.
    pub alpha: f64,
    pub data: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub eval_answers: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides the decode and training seeds when set.
    pub seed: Option<u64>,
    pub learning_rates: Vec<f64>,
    pub decode: DecodeConfig,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            subtask: None,
            method: None,
            normalization: Normalization::Raw,
            content_only: false,
            separator: false,
            backend: None,
            alpha: 1.0,
            data: None,
            answers: None,
            eval_data: None,
            eval_answers: None,
            out: None,
            seed: None,
            learning_rates: SWEEP_LEARNING_RATES.to_vec(),
            decode: DecodeConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.map_paths(|p| if p.is_relative() { base.join(p) } else { p.to_path_buf() })?;
        Ok(cfg)
    }

    fn map_paths(&mut self, f: impl Fn(&Path) -> PathBuf) -> Result<()> {
        for slot in [
            &mut self.data,
            &mut self.answers,
            &mut self.eval_data,
            &mut self.eval_answers,
            &mut self.out,
        ] {
            if let Some(p) = slot.as_mut() {
                *p = f(p);
            }
        }
        if let Some(b) = &self.backend {
            let spec = match b.parse::<BackendSpec>()? {
                BackendSpec::Count(p) => BackendSpec::Count(f(&p)),
                BackendSpec::Linear(p) => BackendSpec::Linear(f(&p)),
                s @ BackendSpec::Service(_) => s,
            };
            self.backend = Some(spec.to_string());
        }
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<Option<BackendSpec>> {
        self.backend.as_deref().map(str::parse).transpose()
    }

    fn resolved_seeds(&mut self) {
        if let Some(seed) = self.seed {
            self.decode.seed = seed;
            self.training.seed = seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "comve",
    version,
    about = "Commonsense validation, explanation and reason generation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true, env = OUT_ENV, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// count:CORPUS, service:ADDR or linear:MODEL.json
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Gold labels or references; enables scoring.
    #[arg(long, value_name = "CSV")]
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// Mask only the statement tokens, not the markers.
    #[arg(long)]
    pub content_only: bool,
    /// Smoothing for count backends.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub subtask: Option<Subtask>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "CSV")]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub eval_answers: Option<PathBuf>,
    #[arg(long)]
    pub separator: bool,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick the nonsense statement of each pair.
    ValidateA {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Pick the reason that explains each nonsense statement.
    ExplainB {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Separator token between statement and reason.
        #[arg(long)]
        separator: bool,
    },
    /// Generate a reason for each nonsense statement.
    GenerateC {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score a predictions file against gold answers.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        subtask: Subtask,
        /// Also write the report here.
        #[arg(long, value_name = "JSON")]
        report: Option<PathBuf>,
    },
    /// Fine-tune a linear scorer or pair classifier.
    Train(TrainArgs),
    /// Fine-tune once per peak learning rate and rank by eval accuracy.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',')]
        learning_rates: Option<Vec<f64>>,
    },
    /// Tabulate the headline metric of several runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Summarize a dataset.
    DatasetStats {
        #[arg(long)]
        subtask: Subtask,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Serve count models built from the `count:` backend corpus.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Sample,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Sample => Strategy::Sample,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ValidateA { .. } => "validate-a",
            Command::ExplainB { .. } => "explain-b",
            Command::GenerateC { .. } => "generate-c",
            Command::Evaluate { .. } => "evaluate",
            Command::Train(_) => "train",
            Command::Sweep { .. } => "sweep",
            Command::Compare { .. } => "compare",
            Command::DatasetStats { .. } => "dataset-stats",
            Command::Serve { .. } => "serve",
        }
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

fn usage(error: Error) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error,
    }
}

fn runtime(error: Error) -> CliError {
    CliError {
        code: EXIT_PARTIAL,
        error,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<i32> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::from_file(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let name = cli.command.name();
    if let Some(c) = &cfg.command {
        if c != name
            && matches!(
                cli.command,
                Command::ValidateA { .. }
                    | Command::ExplainB { .. }
                    | Command::GenerateC { .. }
                    | Command::Train(_)
                    | Command::Sweep { .. }
            )
        {
            return Err(usage(Error::Config(format!("config is for {c}, not {name}"))));
        }
    }
    if cli.global.seed.is_some() {
        cfg.seed = cli.global.seed;
    }
    if cli.global.out.is_some() {
        cfg.out = cli.global.out.clone();
    }
    if cli.global.backend.is_some() {
        cfg.backend = cli.global.backend.clone();
    }
    match cli.command {
        Command::ValidateA { data, method, scoring } => {
            apply_data(&mut cfg, data);
            apply_scoring(&mut cfg, scoring);
            cfg.subtask = Some(Subtask::A);
            if method.is_some() {
                cfg.method = method;
            }
            run_pipeline(cfg, name)
        }
        Command::ExplainB {
            data,
            scoring,
            separator,
        } => {
            apply_data(&mut cfg, data);
            apply_scoring(&mut cfg, scoring);
            cfg.subtask = Some(Subtask::B);
            cfg.separator |= separator;
            run_pipeline(cfg, name)
        }
        Command::GenerateC {
            data,
            method,
            alpha,
            max_new_tokens,
            strategy,
            temperature,
            top_k,
        } => {
            apply_data(&mut cfg, data);
            cfg.subtask = Some(Subtask::C);
            if method.is_some() {
                cfg.method = method;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(n) = max_new_tokens {
                cfg.decode.max_new_tokens = n;
            }
            if let Some(s) = strategy {
                cfg.decode.strategy = s.into();
            }
            if let Some(t) = temperature {
                cfg.decode.temperature = t;
            }
            if top_k.is_some() {
                cfg.decode.top_k = top_k;
            }
            run_pipeline(cfg, name)
        }
        Command::Evaluate {
            predictions,
            gold,
            subtask,
            report,
        } => {
            let r = evaluate(&predictions, &gold, subtask)?;
            let json = serde_json::to_string_pretty(&r).map_err(|e| runtime(e.into()))?;
            emit(&json);
            if let Some(p) = report {
                write_text(&p, &(json + "\n")).map_err(runtime)?;
            }
            Ok(EXIT_OK)
        }
        Command::Train(args) => {
            apply_train(&mut cfg, args);
            run_pipeline(cfg, name)
        }
        Command::Sweep { train, learning_rates } => {
            apply_train(&mut cfg, train);
            if let Some(l) = learning_rates {
                cfg.learning_rates = l;
            }
            run_pipeline(cfg, name)
        }
        Command::Compare { runs, json } => {
            let rows = compare(&runs)?;
            if json {
                emit(serde_json::to_string_pretty(&rows).map_err(|e| runtime(e.into()))?);
            } else {
                emit(render_table(&rows).trim_end());
            }
            Ok(EXIT_OK)
        }
        Command::DatasetStats { subtask, data } => {
            apply_data(&mut cfg, data);
            let path = require_path(&cfg.data, "--data")?;
            let ds = load_dataset(subtask, &path, cfg.answers.as_deref()).map_err(usage)?;
            emit(serde_json::to_string_pretty(&dataset_stats(&ds)).map_err(|e| runtime(e.into()))?);
            Ok(EXIT_OK)
        }
        Command::Serve { listen, top_k, scoring } => {
            apply_scoring(&mut cfg, scoring);
            serve_count(&cfg, &listen, top_k)
        }
    }
}

fn apply_data(cfg: &mut RunConfig, data: DataArgs) {
    if data.data.is_some() {
        cfg.data = data.data;
    }
    if data.answers.is_some() {
        cfg.answers = data.answers;
    }
}

fn apply_scoring(cfg: &mut RunConfig, s: ScoringArgs) {
    if let Some(n) = s.normalization {
        cfg.normalization = n;
    }
    cfg.content_only |= s.content_only;
    if let Some(a) = s.alpha {
        cfg.alpha = a;
    }
}

fn apply_train(cfg: &mut RunConfig, a: TrainArgs) {
    apply_data(cfg, a.data);
    if a.subtask.is_some() {
        cfg.subtask = a.subtask;
    }
    if a.method.is_some() {
        cfg.method = a.method;
    }
    if a.eval_data.is_some() {
        cfg.eval_data = a.eval_data;
    }
    if a.eval_answers.is_some() {
        cfg.eval_answers = a.eval_answers;
    }
    cfg.separator |= a.separator;
    let t = &mut cfg.training;
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.num_train_epochs = v;
    }
    if let Some(v) = a.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = a.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
}

fn require_path(p: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = p
        .clone()
        .ok_or_else(|| usage(Error::Config(format!("{flag} is required"))))?;
    canonical(&p).map_err(usage)
}

fn canonical(p: &Path) -> Result<PathBuf> {
    p.canonicalize().map_err(|e| Error::io(format!("{}", p.display()), e))
}

/// Checks the config and makes every path absolute.
fn resolve(mut cfg: RunConfig, command: &str) -> CliResult<RunConfig> {
    cfg.command = Some(command.to_owned());
    let subtask = cfg
        .subtask
        .ok_or_else(|| usage(Error::Config("subtask is required".into())))?;
    let trains = matches!(command, "train" | "sweep");
    let method = cfg.method.unwrap_or(if trains {
        Method::Mc
    } else {
        Method::default_for(subtask)
    });
    let allowed: &[Method] = if trains {
        match subtask {
            Subtask::A => &[Method::Mc, Method::Classify],
            Subtask::B => &[Method::Mc],
            Subtask::C => return Err(usage(Error::Config("training covers subtasks A and B".into()))),
        }
    } else {
        Method::allowed(subtask)
    };
    if !allowed.contains(&method) {
        return Err(usage(Error::Config(format!(
            "method {method} is not available for subtask {subtask} in {command}"
        ))));
    }
    cfg.method = Some(method);
    if !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
        return Err(usage(Error::Config(format!(
            "alpha must be positive, got {}",
            cfg.alpha
        ))));
    }
    cfg.resolved_seeds();
    cfg.decode.validate().map_err(usage)?;
    cfg.training.validate().map_err(usage)?;
    if command == "sweep" {
        if cfg.learning_rates.is_empty() {
            return Err(usage(Error::Config("learning_rates is empty".into())));
        }
        for &lr in &cfg.learning_rates {
            TrainingConfig {
                learning_rate: lr,
                ..cfg.training.clone()
            }
            .validate()
            .map_err(usage)?;
        }
    }
    cfg.data = Some(require_path(&cfg.data, "--data")?);
    if trains && cfg.answers.is_none() {
        return Err(usage(Error::Config("training needs --answers".into())));
    }
    for slot in [&mut cfg.answers, &mut cfg.eval_data, &mut cfg.eval_answers] {
        if let Some(p) = slot.as_ref() {
            *slot = Some(canonical(p).map_err(usage)?);
        }
    }
    if cfg.eval_data.is_some() != cfg.eval_answers.is_some() {
        return Err(usage(Error::Config(
            "--eval-data and --eval-answers go together".into(),
        )));
    }
    if let Some(spec) = cfg.backend_spec().map_err(usage)? {
        let spec = match spec {
            BackendSpec::Count(p) => BackendSpec::Count(canonical(&p).map_err(usage)?),
            BackendSpec::Linear(p) => BackendSpec::Linear(canonical(&p).map_err(usage)?),
            s => s,
        };
        cfg.backend = Some(spec.to_string());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let out = if out.is_absolute() {
        out
    } else {
        std::env::current_dir()
            .map_err(|e| usage(Error::io("current directory", e)))?
            .join(out)
    };
    cfg.out = Some(out);
    Ok(cfg)
}

/// Appends lines to `log.txt` and mirrors them to the logger.
struct RunLog(Mutex<File>);

impl RunLog {
    fn line(&self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        log::info!("{msg}");
        let stamp = chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%.3f");
        let mut f = self.0.lock().unwrap_or_else(|p| p.into_inner());
        let _ = writeln!(f, "{stamp} {msg}");
    }
}

/// Creates `<root>/<command>-<timestamp>`, adding `-2`, `-3`, ... when the
/// name is taken.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    let stem = format!("{command}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(format!("creating {}", dir.display()), e)),
        }
    }
    unreachable!()
}

/// Prints a line, ignoring a closed stdout.
fn emit(text: impl fmt::Display) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Accuracy(AccuracyReport),
    Bleu(BleuReport),
}

impl Report {
    /// Metric name and value used for ranking.
    pub fn headline(&self) -> (&'static str, f64) {
        match self {
            Report::Accuracy(a) => ("accuracy", a.accuracy),
            Report::Bleu(b) => ("bleu", b.score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub command: String,
    pub subtask: Subtask,
    pub method: Method,
    pub examples: usize,
    pub predicted: usize,
    /// Present when gold answers were given.
    pub report: Option<Report>,
    pub failures: Vec<ExampleFailure>,
    pub elapsed_seconds: f64,
    pub version: String,
}

struct Backends {
    masked: Option<Box<dyn MaskedLm>>,
    classifier: Option<Box<dyn PairClassifier>>,
    scorer: Option<Box<dyn ChoiceScorer>>,
    generator: Option<Box<dyn Generator>>,
}

fn load_backends(cfg: &RunConfig, method: Method) -> Result<Backends> {
    let mut b = Backends {
        masked: None,
        classifier: None,
        scorer: None,
        generator: None,
    };
    let spec = match cfg.backend_spec()? {
        Some(s) => s,
        None if matches!(method, Method::Identity) => return Ok(b),
        None => return Err(Error::Config(format!("method {method} needs --backend"))),
    };
    let opts = PllOptions {
        mode: cfg.normalization,
        content_only: cfg.content_only,
        ..PllOptions::default()
    };
    match (spec, method) {
        (_, Method::Identity) => {}
        (BackendSpec::Count(p), Method::Lm) => {
            b.generator = Some(Box::new(BigramGenerator::from_corpus_file(&p, cfg.alpha)?))
        }
        (BackendSpec::Count(p), m) => {
            let lm = CountMaskedLm::from_corpus_file(&p, cfg.alpha)?;
            match m {
                Method::Mlm => b.masked = Some(Box::new(lm)),
                Method::Classify => b.classifier = Some(Box::new(UnknownCountClassifier::from_masked_lm(&lm))),
                _ => b.scorer = Some(Box::new(PllChoiceScorer::with_options(lm, opts))),
            }
        }
        (BackendSpec::Service(addr), m) => {
            let s = ServiceBackend::connect(&addr)?;
            match m {
                Method::Mlm => b.masked = Some(Box::new(s)),
                Method::Classify => b.classifier = Some(Box::new(s)),
                Method::Lm => b.generator = Some(Box::new(s)),
                _ => b.scorer = Some(Box::new(s)),
            }
        }
        (BackendSpec::Linear(p), Method::Mc) => b.scorer = Some(Box::new(LinearChoiceScorer::load(&p)?)),
        (BackendSpec::Linear(p), Method::Classify) => b.classifier = Some(Box::new(LinearPairClassifier::load(&p)?)),
        (BackendSpec::Linear(_), m) => {
            return Err(Error::Config(format!("a linear backend cannot serve method {m}")));
        }
    }
    Ok(b)
}

type Outcomes<T> = Vec<(String, Result<T>)>;

fn split_outcomes<T>(outcomes: Outcomes<T>) -> (Vec<(String, T)>, Vec<ExampleFailure>) {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in outcomes {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => failures.push(ExampleFailure {
                id,
                error: e.to_string(),
            }),
        }
    }
    (ok, failures)
}

fn write_labels(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label"])?;
    for (id, l) in rows {
        w.write_record([id.as_str(), &l.to_string()])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn label_report(rows: &[(String, usize)], gold: &[(String, Option<usize>)]) -> Result<Option<Report>> {
    if gold.iter().any(|(_, g)| g.is_none()) || rows.is_empty() {
        return Ok(None);
    }
    let by_id: std::collections::HashMap<&str, usize> = gold.iter().map(|(i, g)| (i.as_str(), g.unwrap())).collect();
    let (pred, gold): (Vec<usize>, Vec<usize>) = rows.iter().map(|(id, p)| (*p, by_id[id.as_str()])).unzip();
    Ok(Some(Report::Accuracy(accuracy(&pred, &gold)?)))
}

struct Products {
    failures: Vec<ExampleFailure>,
    predicted: usize,
    report: Option<Report>,
}

fn run_pipeline(cfg: RunConfig, command: &str) -> CliResult<i32> {
    let started = Instant::now();
    let cfg = resolve(cfg, command)?;
    let subtask = cfg.subtask.expect("resolved");
    let method = cfg.method.expect("resolved");
    let data_path = cfg.data.clone().expect("resolved");
    let dataset = load_dataset(subtask, &data_path, cfg.answers.as_deref()).map_err(usage)?;
    let eval_set = match (&cfg.eval_data, &cfg.eval_answers) {
        (Some(d), Some(a)) => Some(load_dataset(subtask, d, Some(a)).map_err(usage)?),
        _ => None,
    };
    let trains = matches!(command, "train" | "sweep");
    let backends = if trains {
        None
    } else {
        Some(load_backends(&cfg, method).map_err(usage)?)
    };
    let snapshot = cfg.to_toml().map_err(usage)?;

    let dir = create_run_dir(cfg.out.as_deref().expect("resolved"), command).map_err(runtime)?;
    write_text(&dir.join("config.snapshot"), &snapshot).map_err(runtime)?;
    let log_file = File::create(dir.join("log.txt")).map_err(|e| runtime(Error::io("creating log.txt", e)))?;
    let log = RunLog(Mutex::new(log_file));
    log.line(format!("comve {VERSION} {command} subtask {subtask} method {method}"));
    log.line(format!("run directory {}", dir.display()));
    log.line(format!("{} examples from {}", dataset.len(), data_path.display()));

    let products = match backends {
        Some(b) => predict(&cfg, &dataset, &b, &dir),
        None => train_run(&cfg, &dataset, eval_set.as_ref(), &dir, &log),
    }
    .map_err(|e| {
        log.line(format!("failed: {e}"));
        runtime(e)
    })?;
    for f in &products.failures {
        log.line(format!("example {} failed: {}", f.id, f.error));
    }
    if let Some(r) = &products.report {
        let (name, value) = r.headline();
        log.line(format!("{name} {value}"));
    }
    let metrics = RunMetrics {
        command: command.to_owned(),
        subtask,
        method,
        examples: eval_set.as_ref().unwrap_or(&dataset).len(),
        predicted: products.predicted,
        report: products.report,
        failures: products.failures,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        version: VERSION.to_owned(),
    };
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| runtime(e.into()))?;
    write_text(&dir.join("metrics.json"), &(json + "\n")).map_err(runtime)?;
    log.line(format!("done in {:.3}s", metrics.elapsed_seconds));
    emit(dir.display());
    if metrics.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "{} of {} examples failed; see {}",
            metrics.failures.len(),
            metrics.examples,
            dir.join("log.txt").display()
        );
        Ok(EXIT_PARTIAL)
    }
}

fn predict(cfg: &RunConfig, dataset: &Dataset, b: &Backends, dir: &Path) -> Result<Products> {
    let predictions = dir.join("predictions.csv");
    match dataset {
        Dataset::A(pairs) => {
            let opts = PllOptions {
                mode: cfg.normalization,
                content_only: cfg.content_only,
                ..PllOptions::default()
            };
            let outcomes: Outcomes<usize> = pairs
                .par_iter()
                .map(|p| {
                    let r = if let Some(m) = &b.masked {
                        choose_plausible_with(p, m.as_ref(), &opts).map(|c| 1 - c.index)
                    } else if let Some(c) = &b.classifier {
                        classify_validation(p, c.as_ref()).map(|c| c.nonsense_index)
                    } else {
                        let s = b.scorer.as_ref().expect("backend loaded");
                        select_validation(p, s.as_ref()).map(|(k, _)| k)
                    };
                    (p.id.clone(), r)
                })
                .collect();
            let (rows, failures) = split_outcomes(outcomes);
            write_labels(&predictions, &rows)?;
            let gold: Vec<_> = pairs.iter().map(|p| (p.id.clone(), p.nonsense_index)).collect();
            Ok(Products {
                report: label_report(&rows, &gold)?,
                predicted: rows.len(),
                failures,
            })
        }
        Dataset::B(items) => {
            let scorer = b.scorer.as_ref().expect("backend loaded");
            let format = ExplanationFormat {
                separator: cfg.separator,
            };
            let outcomes: Outcomes<usize> = items
                .par_iter()
                .map(|it| {
                    (
                        it.id.clone(),
                        select_explanation(it, scorer.as_ref(), format).map(|s| s.index),
                    )
                })
                .collect();
            let (rows, failures) = split_outcomes(outcomes);
            write_labels(&predictions, &rows)?;
            let gold: Vec<_> = items.iter().map(|i| (i.id.clone(), i.gold_index)).collect();
            Ok(Products {
                report: label_report(&rows, &gold)?,
                predicted: rows.len(),
                failures,
            })
        }
        Dataset::C(items) => {
            let system = match &b.generator {
                Some(g) => GenerationSystem::Lm(g.as_ref()),
                None => GenerationSystem::Identity,
            };
            let batch = batch_generate(items, system, &cfg.decode)?;
            write_candidates(&predictions, &batch.candidates)?;
            let report = if items.iter().all(|i| !i.references.is_empty()) && !batch.candidates.is_empty() {
                let refs: std::collections::HashMap<&str, &Vec<String>> =
                    items.iter().map(|i| (i.id.as_str(), &i.references)).collect();
                let ids: Vec<&str> = batch.candidates.iter().map(|(i, _)| i.as_str()).collect();
                let cands: Vec<&str> = batch.candidates.iter().map(|(_, c)| c.as_str()).collect();
                let gold: Vec<Vec<String>> = ids.iter().map(|i| refs[i].clone()).collect();
                Some(Report::Bleu(corpus_bleu_with_ids(&ids, &cands, &gold)?))
            } else {
                None
            };
            Ok(Products {
                predicted: batch.candidates.len(),
                failures: batch
                    .failures
                    .into_iter()
                    .map(|(id, error)| ExampleFailure { id, error })
                    .collect(),
                report,
            })
        }
    }
}

enum TrainData {
    Choices(Vec<Labeled<crate::choice::ChoiceSet>>),
    Pairs(Vec<Labeled<crate::corpus::TokenSequence>>),
}

fn train_data(dataset: &Dataset, method: Method, separator: bool) -> Result<TrainData> {
    let markers = crate::backends::Markers::default();
    let unlabeled = |id: &str| Error::InvalidArgument(format!("example {id} has no label"));
    match (dataset, method) {
        (Dataset::A(pairs), Method::Classify) => Ok(TrainData::Pairs(
            pairs
                .iter()
                .map(|p| {
                    Ok(Labeled {
                        example: concat_pair(p, &markers)?,
                        label: p.nonsense_index.ok_or_else(|| unlabeled(&p.id))?,
                    })
                })
                .collect::<Result<_>>()?,
        )),
        (Dataset::A(pairs), _) => Ok(TrainData::Choices(labeled_choice_sets(
            pairs
                .iter()
                .map(|p| build_validation_choices(p, &markers))
                .collect::<Result<_>>()?,
        )?)),
        (Dataset::B(items), _) => {
            let format = ExplanationFormat { separator };
            Ok(TrainData::Choices(labeled_choice_sets(
                items
                    .iter()
                    .map(|i| build_explanation_candidates(i, &markers, format))
                    .collect::<Result<_>>()?,
            )?))
        }
        (Dataset::C(_), _) => Err(Error::Config("training covers subtasks A and B".into())),
    }
}

/// Prediction for a trained model, in the answer-file convention of the
/// subtask.
fn trained_label(subtask: Subtask, method: Method, argmax: usize) -> usize {
    match (subtask, method) {
        // the choice scorer picks the sensible statement
        (Subtask::A, Method::Mc) => 1 - argmax,
        _ => argmax,
    }
}

fn train_run(
    cfg: &RunConfig,
    dataset: &Dataset,
    eval_set: Option<&Dataset>,
    dir: &Path,
    log: &RunLog,
) -> Result<Products> {
    let subtask = cfg.subtask.expect("resolved");
    let method = cfg.method.expect("resolved");
    let eval_ds = eval_set.unwrap_or(dataset);
    let train = train_data(dataset, method, cfg.separator)?;
    let eval = train_data(eval_ds, method, cfg.separator)?;
    let sweeping = cfg.command.as_deref() == Some("sweep");
    let grid: Vec<TrainingConfig> = if sweeping {
        cfg.learning_rates
            .iter()
            .map(|&lr| TrainingConfig {
                learning_rate: lr,
                ..cfg.training.clone()
            })
            .collect()
    } else {
        vec![cfg.training.clone()]
    };
    log.line(format!("training {} configs", grid.len()));

    // each arm returns the eval predictions of the best model
    let (history, predictions, sweep) = match (train, eval) {
        (TrainData::Choices(tr), TrainData::Choices(ev)) => {
            let sets: Vec<_> = tr.iter().map(|l| l.example.clone()).collect();
            let model = LinearChoiceScorer::for_choice_sets(&sets);
            let results = hyperparameter_sweep(&model, &grid, &tr, &ev)?;
            let best = &results[0];
            let (trained, _) = fine_tune(model, &tr, &best.config)?;
            trained.save(&dir.join("model.json"))?;
            let preds = ev
                .iter()
                .map(|l| {
                    Ok((
                        l.example.item_id.clone(),
                        crate::choice::select_choice(&l.example, &trained)?.index,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            (best.history.clone(), preds, results)
        }
        (TrainData::Pairs(tr), TrainData::Pairs(ev)) => {
            let seqs: Vec<_> = tr.iter().map(|l| l.example.clone()).collect();
            let model = LinearPairClassifier::for_sequences(&seqs);
            let results = hyperparameter_sweep(&model, &grid, &tr, &ev)?;
            let best = &results[0];
            let (trained, _) = fine_tune(model, &tr, &best.config)?;
            trained.save(&dir.join("model.json"))?;
            let ids = eval_ds.ids();
            let preds = ev
                .iter()
                .zip(ids)
                .map(|(l, id)| {
                    let d = crate::backends::classify_pair(&trained, &l.example)?;
                    Ok((id.to_owned(), crate::choice::Selection::from_scores(d.to_vec())?.index))
                })
                .collect::<Result<Vec<_>>>()?;
            (best.history.clone(), preds, results)
        }
        _ => unreachable!("train and eval data share a method"),
    };
    history.write_csv(&dir.join("history.csv"))?;
    let best_cfg = &sweep[0].config;
    history.write_summary(&dir.join("training_summary.json"), best_cfg)?;
    if sweeping {
        let table: Vec<_> = sweep
            .iter()
            .map(|r| {
                serde_json::json!({
                    "grid_index": r.grid_index,
                    "learning_rate": r.config.learning_rate,
                    "eval": r.eval,
                    "final_loss": r.history.final_loss(),
                })
            })
            .collect();
        write_text(&dir.join("sweep.json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
        for r in &sweep {
            log.line(format!(
                "lr {:e}: eval accuracy {}",
                r.config.learning_rate, r.eval.accuracy
            ));
        }
    }
    if let Some(l) = history.final_loss() {
        log.line(format!("{} steps, final loss {l:.6}", history.records.len()));
    }
    let rows: Vec<(String, usize)> = predictions
        .into_iter()
        .map(|(id, k)| (id, trained_label(subtask, method, k)))
        .collect();
    write_labels(&dir.join("predictions.csv"), &rows)?;
    let gold: Vec<(String, Option<usize>)> = match eval_ds {
        Dataset::A(p) => p.iter().map(|p| (p.id.clone(), p.nonsense_index)).collect(),
        Dataset::B(i) => i.iter().map(|i| (i.id.clone(), i.gold_index)).collect(),
        Dataset::C(_) => Vec::new(),
    };
    Ok(Products {
        report: label_report(&rows, &gold)?,
        predicted: rows.len(),
        failures: Vec::new(),
    })
}

fn id_mismatch(pred: &[&str], gold: &[&str]) -> Result<()> {
    use std::collections::BTreeSet;
    let p: BTreeSet<&str> = pred.iter().copied().collect();
    let g: BTreeSet<&str> = gold.iter().copied().collect();
    let mut bad: Vec<String> = p.symmetric_difference(&g).map(|s| s.to_string()).collect();
    if p.len() != pred.len() {
        bad.push("(duplicate prediction ids)".into());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::IdMismatch(bad))
    }
}

/// Scores a predictions file against gold answers. Rows are matched by id.
pub fn evaluate(predictions: &Path, gold: &Path, subtask: Subtask) -> CliResult<Report> {
    match subtask.num_choices() {
        Some(k) => {
            let pred = load_labels(predictions, k).map_err(usage)?;
            let gold = load_labels(gold, k).map_err(usage)?;
            id_mismatch(
                &pred.iter().map(|(i, _)| i.as_str()).collect::<Vec<_>>(),
                &gold.iter().map(|(i, _)| i.as_str()).collect::<Vec<_>>(),
            )
            .map_err(usage)?;
            let by_id: std::collections::HashMap<&str, usize> = pred.iter().map(|(i, l)| (i.as_str(), *l)).collect();
            let p: Vec<usize> = gold.iter().map(|(i, _)| by_id[i.as_str()]).collect();
            let g: Vec<usize> = gold.iter().map(|(_, l)| *l).collect();
            Ok(Report::Accuracy(accuracy(&p, &g).map_err(usage)?))
        }
        None => {
            let pred = load_texts(predictions).map_err(usage)?;
            let gold = load_references(gold).map_err(usage)?;
            id_mismatch(
                &pred.iter().map(|(i, _)| i.as_str()).collect::<Vec<_>>(),
                &gold.iter().map(|(i, _)| i.as_str()).collect::<Vec<_>>(),
            )
            .map_err(usage)?;
            // aggregate in prediction order so the sum matches the run's own
            let refs: std::collections::HashMap<&str, &Vec<String>> =
                gold.iter().map(|(i, r)| (i.as_str(), r)).collect();
            let ids: Vec<&str> = pred.iter().map(|(i, _)| i.as_str()).collect();
            let cands: Vec<&str> = pred.iter().map(|(_, c)| c.as_str()).collect();
            let refs: Vec<Vec<String>> = ids.iter().map(|i| refs[i].clone()).collect();
            Ok(Report::Bleu(corpus_bleu_with_ids(&ids, &cands, &refs).map_err(usage)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub command: String,
    pub method: Method,
    pub metric: String,
    pub value: f64,
}

/// Reads `metrics.json` from each run and sorts by headline metric,
/// descending. Equal values keep the given order.
pub fn compare(runs: &[PathBuf]) -> CliResult<Vec<ComparisonRow>> {
    if runs.len() < 2 {
        return Err(usage(Error::InvalidArgument("compare needs at least two runs".into())));
    }
    let mut subtask = None;
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| usage(Error::io(format!("reading {}", path.display()), e)))?;
        let m: RunMetrics = serde_json::from_str(&text).map_err(|e| usage(e.into()))?;
        match subtask {
            None => subtask = Some(m.subtask),
            Some(s) if s != m.subtask => {
                return Err(usage(Error::InvalidArgument(format!(
                    "{} is subtask {}, earlier runs are subtask {s}",
                    dir.display(),
                    m.subtask
                ))))
            }
            _ => {}
        }
        let report = m.report.ok_or_else(|| {
            usage(Error::InvalidArgument(format!(
                "{} has no metric report",
                dir.display()
            )))
        })?;
        let (metric, value) = report.headline();
        rows.push(ComparisonRow {
            run: dir.display().to_string(),
            command: m.command,
            method: m.method,
            metric: metric.to_owned(),
            value,
        });
    }
    rows.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(rows)
}

pub fn render_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:<width$}  {:<12}  {:<8}  {:<8}  {}\n",
        "run", "command", "method", "metric", "value"
    );
    for r in rows {
        out += &format!(
            "{:<width$}  {:<12}  {:<8}  {:<8}  {:.4}\n",
            r.run,
            r.command,
            r.method.to_string(),
            r.metric,
            r.value
        );
    }
    out
}

fn token_summary(lengths: &[usize]) -> serde_json::Value {
    let n = lengths.len().max(1) as f64;
    serde_json::json!({
        "mean": lengths.iter().sum::<usize>() as f64 / n,
        "min": lengths.iter().min(),
        "max": lengths.iter().max(),
    })
}

fn token_len(text: &str) -> usize {
    tokenize_reference(text).map(|t| t.len()).unwrap_or(0)
}

pub fn dataset_stats(ds: &Dataset) -> serde_json::Value {
    let mut labels = std::collections::BTreeMap::<String, usize>::new();
    let (lengths, refs): (Vec<usize>, Option<Vec<usize>>) = match ds {
        Dataset::A(p) => {
            for l in p.iter().filter_map(|p| p.nonsense_index) {
                *labels.entry(l.to_string()).or_default() += 1;
            }
            (p.iter().flat_map(|p| p.statements().map(token_len)).collect(), None)
        }
        Dataset::B(i) => {
            for l in i.iter().filter_map(|i| i.gold_index) {
                *labels.entry(l.to_string()).or_default() += 1;
            }
            (i.iter().map(|i| token_len(&i.false_statement)).collect(), None)
        }
        Dataset::C(i) => (
            i.iter().map(|i| token_len(&i.false_statement)).collect(),
            Some(i.iter().map(|i| i.references.len()).collect()),
        ),
    };
    let mut v = serde_json::json!({
        "subtask": ds.subtask(),
        "examples": ds.len(),
        "statement_tokens": token_summary(&lengths),
        "labels": labels,
    });
    if let Some(r) = refs {
        v["references_per_example"] = token_summary(&r);
    }
    v
}

fn serve_count(cfg: &RunConfig, listen: &str, top_k: Option<usize>) -> CliResult<i32> {
    let corpus = match cfg.backend_spec().map_err(usage)? {
        Some(BackendSpec::Count(p)) => p,
        _ => return Err(usage(Error::Config("serve needs --backend count:CORPUS".into()))),
    };
    let lm = CountMaskedLm::from_corpus_file(&corpus, cfg.alpha).map_err(usage)?;
    let generator = BigramGenerator::from_corpus_file(&corpus, cfg.alpha).map_err(usage)?;
    let opts = PllOptions {
        mode: cfg.normalization,
        content_only: cfg.content_only,
        ..PllOptions::default()
    };
    let models = ServedModels {
        classifier: Some(Arc::new(UnknownCountClassifier::from_masked_lm(&lm))),
        scorer: Some(Arc::new(PllChoiceScorer::with_options(lm.clone(), opts))),
        masked: Some(Arc::new(lm)),
        generator: Some(Arc::new(generator)),
        top_k,
    };
    let listener = TcpListener::bind(listen).map_err(|e| usage(Error::io(format!("binding {listen}"), e)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| runtime(Error::io("local address", e)))?;
    emit(format!("listening on {addr}"));
    let _ = std::io::stdout().flush();
    crate::backends::serve(listener, Arc::new(models)).map_err(|e| runtime(Error::io("serving", e)))?;
    Ok(EXIT_OK)
}

//! `nextutt`: corpus statistics, word vectors, ESIM training and evaluation.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nextutt", version, about = "Next-utterance selection toolkit")]
struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set esim.epochs=3`. Repeatable; later wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress and loader diagnostics to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pair counts and median lengths of labeled pair files.
    Stats(StatsArgs),
    /// Train skip-gram vectors on the utterances of pair files.
    TrainW2v(TrainW2vArgs),
    /// Join pretrained and task-trained vectors over the task vocabulary.
    Combine(CombineArgs),
    /// Share of corpus tokens covered by each vector table.
    Coverage(CoverageArgs),
    /// Train the ESIM matcher.
    Train(TrainArgs),
    /// Score a ranking file and report R@k, P@1, MRR and MAP.
    Eval(EvalArgs),
    /// Rank candidate responses for one context.
    Rank(RankArgs),
    /// Tokens ranked by signal strength for one context/response pair.
    Explain(ExplainArgs),
    /// Average-of-word-vectors cosine baseline, one row per table.
    BaselineEval(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Labeled pair file(s) (context, response, label).
    #[arg(long = "input", required = true, value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    /// Print JSON instead of `key: value` lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct TrainW2vArgs {
    /// Pair file(s) whose contexts and responses form the training sentences.
    #[arg(long = "input", value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    /// Output table (word2vec text). Falls back to `paths.trained`.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Vector dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Maximum context window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Negative samples per positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Passes over the corpus.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minimum token count to get a vector.
    #[arg(long)]
    pub min_count: Option<u64>,
    /// Initial learning rate (decays linearly).
    #[arg(long)]
    pub lr: Option<f32>,
    /// Frequent-word subsampling threshold; 0 disables.
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CombineArgs {
    /// Pretrained vector file. Falls back to `paths.pretrained`.
    #[arg(long, value_name = "FILE")]
    pub pretrained: Option<PathBuf>,
    /// Task-trained vector file. Falls back to `paths.trained`.
    #[arg(long, value_name = "FILE")]
    pub trained: Option<PathBuf>,
    /// Pair file(s) defining the task vocabulary.
    #[arg(long = "corpus", value_name = "FILE")]
    pub corpus: Vec<PathBuf>,
    /// Output table (word2vec text). Falls back to `paths.embeddings`.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    /// Pair file(s) to measure.
    #[arg(long = "corpus", required = true, value_name = "FILE")]
    pub corpus: Vec<PathBuf>,
    /// Vector table as NAME=FILE (or FILE, named by its stem). Repeatable.
    #[arg(long = "table", required = true, value_name = "NAME=FILE")]
    pub tables: Vec<String>,
    /// Print JSON instead of a text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training pairs. Falls back to `paths.train`.
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Validation ranking file for model selection. Falls back to `paths.valid`.
    #[arg(long, value_name = "FILE")]
    pub valid: Option<PathBuf>,
    /// Word vector table for the word part of token vectors. Falls back to `paths.embeddings`.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint directory. Falls back to `paths.checkpoint`.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Log the running loss every N steps (validation points are always logged).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Shorthand for `--set esim.epochs=N`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shorthand for `--set esim.batch_size=N`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Shorthand for `--set esim.initial_lr=X`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Shorthand for `--set esim.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Checkpoint directory. Falls back to `paths.checkpoint`.
    #[arg(long, value_name = "DIR", conflicts_with = "ensemble")]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoints whose probabilities are averaged.
    #[arg(long, value_name = "DIR,DIR,...", value_delimiter = ',')]
    pub ensemble: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ranking file. Falls back to `paths.test`.
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Remove `__eou__`/`__eot__` from contexts and responses before scoring.
    #[arg(long)]
    pub strip_tags: bool,
    /// Also score without tags and print the paired difference.
    #[arg(long, conflicts_with_all = ["strip_tags", "scores"])]
    pub paired: bool,
    /// Skip groups with no positive or only positives.
    #[arg(long)]
    pub filter_degenerate: bool,
    /// Write the candidate scores here.
    #[arg(long, value_name = "FILE")]
    pub save_scores: Option<PathBuf>,
    /// Read scores from a file written by `--save-scores` instead of running a model.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["checkpoint", "ensemble", "test", "save_scores"])]
    pub scores: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Context text, tokens separated by whitespace.
    #[arg(long)]
    pub context: String,
    /// File with one candidate response per line.
    #[arg(long, value_name = "FILE")]
    pub candidates: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Checkpoint directory. Falls back to `paths.checkpoint`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub response: String,
    /// Tokens highlighted per side.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// Ranking file. Falls back to `paths.test`.
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Vector table as NAME=FILE (or FILE). Repeatable; one output row each.
    #[arg(long = "table", required = true, value_name = "NAME=FILE")]
    pub tables: Vec<String>,
    /// Skip groups with no positive or only positives.
    #[arg(long)]
    pub filter_degenerate: bool,
    /// Print long-form CSV (table,metric,value).
    #[arg(long)]
    pub csv: bool,
}

/// Flag shorthands become `--set` entries applied after the global ones.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push(format!("{key}={v}"));
        }
    };
    match cmd {
        Command::TrainW2v(a) => {
            push("word2vec.dim", a.dim.map(|v| v.to_string()));
            push("word2vec.window", a.window.map(|v| v.to_string()));
            push("word2vec.negatives", a.negatives.map(|v| v.to_string()));
            push("word2vec.epochs", a.epochs.map(|v| v.to_string()));
            push("word2vec.min_count", a.min_count.map(|v| v.to_string()));
            push("word2vec.initial_lr", a.lr.map(|v| format!("{v:?}")));
            push("word2vec.subsample", a.subsample.map(|v| format!("{v:?}")));
            push("word2vec.seed", a.seed.map(|v| v.to_string()));
        }
        Command::Train(a) => {
            push("esim.epochs", a.epochs.map(|v| v.to_string()));
            push("esim.batch_size", a.batch_size.map(|v| v.to_string()));
            push("esim.initial_lr", a.lr.map(|v| format!("{v:?}")));
            push("esim.seed", a.seed.map(|v| v.to_string()));
        }
        Command::Eval(a) => {
            if a.strip_tags {
                push("corpus.strip_tags", Some("true".into()));
            }
            if a.filter_degenerate {
                push("metrics.filter_degenerate", Some("true".into()));
            }
        }
        Command::BaselineEval(a) => {
            if a.filter_degenerate {
                push("metrics.filter_degenerate", Some("true".into()));
            }
        }
        _ => {}
    }
    out
}

/// Short machine-readable class of a failure.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use nextutt::corpus::CorpusError;
    use nextutt::embed::EmbedError;
    use nextutt::esim::EsimError;
    use nextutt::metrics::MetricsError;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { "missing-file" } else { "io" };
        }
        if cause.is::<config::ConfigError>() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<EsimError>() {
            return match e {
                EsimError::Checkpoint(_) => "checkpoint",
                EsimError::Config(_) => "config",
                EsimError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing-file",
                EsimError::Diverged { .. } => "diverged",
                _ => "model",
            };
        }
        if let Some(e) = cause.downcast_ref::<EmbedError>() {
            return match e {
                EmbedError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing-file",
                EmbedError::InvalidConfig(_) | EmbedError::InvalidDim(_) => "config",
                _ => "embeddings",
            };
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return match e {
                CorpusError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing-file",
                _ => "corpus",
            };
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if cause.is::<files::ScoreFileError>() || cause.is::<csv::Error>() {
            return "scores";
        }
    }
    "other"
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    for line in cfg.to_toml().lines() {
        eprintln!("# {line}");
    }
    match &cli.command {
        Command::Stats(a) => commands::stats(&cfg, a),
        Command::TrainW2v(a) => commands::train_w2v(&cfg, a),
        Command::Combine(a) => commands::combine(&cfg, a),
        Command::Coverage(a) => commands::coverage(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Rank(a) => commands::rank(&cfg, a),
        Command::Explain(a) => commands::explain(&cfg, a),
        Command::BaselineEval(a) => commands::baseline_eval(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={}", error_kind(&e), msg);
            ExitCode::FAILURE
        }
    }
}

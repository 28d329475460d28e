//! `nsmctl`: generate data, train, evaluate, trace and ablate neural state
//! machines.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nsm_core::synthgen::SynthError;
use nsm_core::trainer::TrainError;
use nsm_core::worldgraph::GraphError;
use serde_json::json;

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "nsmctl", version, about = "Neural state machine experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scenes, graphs, questions and a split manifest.
    GenData(Common),
    /// Train one model and write its checkpoint and metrics.
    Train(Common),
    /// Score a checkpoint on the test split, or sweep the step count.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: <out-dir>/checkpoint.nsm).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the raw weights instead of the EMA weights.
        #[arg(long)]
        raw: bool,
    },
    /// Write per-step attention for selected questions as JSON lines.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated question ids from the dataset.
        #[arg(long, value_delimiter = ',')]
        question_ids: Vec<usize>,
        /// A standalone graph JSON file; requires --question.
        #[arg(long, requires = "question")]
        graph: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Train all four ablation variants over shared data.
    Ablate(Common),
}

/// Flags shared by every subcommand; each overrides the config file entry
/// of the same name.
#[derive(Debug, Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    /// Comma-separated step counts, e.g. 1,2,4,8.
    #[arg(long)]
    steps_sweep: Option<String>,
    /// iid, content or structure.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated categories, objects or template ids.
    #[arg(long)]
    holdout: Option<String>,
    /// Number of consecutive training seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    n_scenes: Option<String>,
    #[arg(long)]
    n_questions: Option<String>,
    /// Comma-separated template ids (default: all).
    #[arg(long)]
    templates: Option<String>,
    #[arg(long)]
    embedding_std: Option<String>,
    #[arg(long)]
    dense_features: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    ema_decay: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    grad_clip_norm: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    validation_fraction: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<Settings> {
        let mut s = Settings::defaults();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("dim", &self.dim),
            ("steps", &self.steps),
            ("ablation", &self.ablation),
            ("steps_sweep", &self.steps_sweep),
            ("split", &self.split),
            ("holdout", &self.holdout),
            ("seeds", &self.seeds),
            ("n_scenes", &self.n_scenes),
            ("n_questions", &self.n_questions),
            ("templates", &self.templates),
            ("embedding_std", &self.embedding_std),
            ("dense_features", &self.dense_features),
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("ema_decay", &self.ema_decay),
            ("dropout", &self.dropout),
            ("grad_clip_norm", &self.grad_clip_norm),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("validation_fraction", &self.validation_fraction),
        ];
        s.apply(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
        )?;
        Ok(s)
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NSM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("NSM_THREADS=`{v}` is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval {
            common,
            checkpoint,
            raw,
        } => commands::eval(&common.resolve()?, checkpoint, raw),
        Command::Trace {
            common,
            checkpoint,
            question_ids,
            graph,
            question,
            top_k,
        } => commands::trace(
            &common.resolve()?,
            commands::TraceRequest {
                checkpoint,
                question_ids,
                graph,
                question,
                top_k,
            },
        ),
        Command::Ablate(c) => commands::ablate(&c.resolve()?),
    }
}

fn graph_kind(e: &GraphError) -> &'static str {
    match e {
        GraphError::Io(_) => "path",
        _ => "graph",
    }
}

fn synth_kind(e: &SynthError) -> &'static str {
    match e {
        SynthError::Io { .. } => "path",
        SynthError::Config(_) | SynthError::EmptyTrain => "config",
        SynthError::Graph(g) => graph_kind(g),
        _ => "data",
    }
}

fn train_kind(e: &TrainError) -> &'static str {
    match e {
        TrainError::CheckpointVersion { .. } => "checkpoint_version",
        TrainError::Io { .. } => "path",
        TrainError::Config(_) => "config",
        TrainError::NonFinite { .. } => "non_finite",
        TrainError::Synth(s) => synth_kind(s),
        TrainError::Graph(g) => graph_kind(g),
        _ => "train",
    }
}

/// Machine-readable category of the first recognised error in the chain.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return synth_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<GraphError>() {
            return graph_kind(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "path";
        }
    }
    "error"
}

/// The error chain joined with `: `, skipping causes a parent already printed.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let body = json!({
                "error": {
                    "kind": error_kind(&err),
                    "message": message(&err),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

//! `valm`: generate the grounded corpus, build the image index and
//! retrieval cache, train, evaluate and benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use valm_core::augment::AugmentError;
use valm_core::encoder::EncoderError;
use valm_core::evalkit::EvalError;
use valm_core::kv::KvConfig;
use valm_core::model::ModelError;
use valm_core::trainer::TrainError;
use valm_core::vindex::IndexError;

use config::{config_error, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "valm", version, about = "Visually-augmented language modeling toolkit")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Retrieval mode: retrieve, disabled or random.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Images per position.
    #[arg(long, global = true)]
    k: Option<String>,
    /// Posting lists searched per query.
    #[arg(long, global = true)]
    nprobe: Option<String>,
    /// Image projection variant.
    #[arg(long = "proj-mode", global = true)]
    proj_mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Any other setting, as key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic grounded corpus, vocabulary, image keys, prompts and items.
    GenCorpus,
    /// Train the IVF-PQ index over the image keys.
    BuildIndex,
    /// Precompute retrieval results for every corpus position.
    BuildCache,
    /// Train a model; writes a checkpoint and the loss curve.
    Train {
        #[arg(long)]
        steps: Option<String>,
    },
    /// Evaluate a checkpoint; writes a JSON and a CSV report.
    Eval {
        /// object, piqa or perplexity.
        #[arg(long)]
        task: Option<String>,
    },
    /// Time forward passes with and without retrieval.
    Bench,
    /// Print the effective configuration, or the schema with --schema.
    ShowConfig {
        #[arg(long)]
        schema: bool,
    },
}

fn flag_layer(cli: &Cli) -> anyhow::Result<KvConfig> {
    let mut kv = KvConfig::new();
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got '{pair}'")))?;
        kv.set(k.trim(), v.trim());
    }
    let named = [
        ("mode", &cli.mode),
        ("k", &cli.k),
        ("nprobe", &cli.nprobe),
        ("proj_mode", &cli.proj_mode),
        ("seed", &cli.seed),
    ];
    for (key, value) in named {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    match &cli.command {
        Command::Train { steps: Some(s) } => kv.set("steps", s),
        Command::Eval { task: Some(t) } => kv.set("task", t),
        _ => {}
    }
    Ok(kv)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::build(cli.config.as_deref(), &flag_layer(cli)?)?;
    match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg),
        Command::BuildIndex => commands::build_index(&cfg),
        Command::BuildCache => commands::build_cache(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Eval { .. } => commands::eval_cmd(&cfg),
        Command::Bench => commands::bench_cmd(&cfg),
        Command::ShowConfig { schema: true } => {
            print!("{}", config::schema_markdown());
            Ok(())
        }
        Command::ShowConfig { schema: false } => {
            print!("# config_sha256 = {}\n{}", cfg.hash(), cfg.to_text());
            Ok(())
        }
    }
}

/// Exit codes by error class.
mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const CORRUPT: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const BAD_INPUT: u8 = 6;
    pub const OTHER: u8 = 1;
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            match e {
                ModelError::CorruptCheckpoint(_) | ModelError::ConfigMismatch(_) => return exit::CORRUPT,
                ModelError::InvalidConfig(_) => return exit::CONFIG,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<AugmentError>() {
            match e {
                AugmentError::CorruptCache(_) | AugmentError::BindingMismatch(_) => return exit::CORRUPT,
                AugmentError::InvalidPlan(_) | AugmentError::SpecInfeasible(_) => return exit::CONFIG,
                _ => {}
            }
        }
        if let Some(IndexError::CorruptIndex(_)) = cause.downcast_ref::<IndexError>() {
            return exit::CORRUPT;
        }
        if let Some(EncoderError::CorruptEmbeddings(_)) = cause.downcast_ref::<EncoderError>() {
            return exit::CORRUPT;
        }
        match cause.downcast_ref::<TrainError>() {
            Some(TrainError::NonFiniteLoss { .. }) => return exit::DIVERGED,
            Some(TrainError::InvalidConfig(_)) => return exit::CONFIG,
            _ => {}
        }
        if let Some(
            EvalError::BadInput { .. }
            | EvalError::GoldLabelMissing(_)
            | EvalError::InvalidPrompt(_)
            | EvalError::EmptyLabelSet
            | EvalError::EmptyLabel(_)
            | EvalError::EmptySolution(_),
        ) = cause.downcast_ref::<EvalError>()
        {
            return exit::BAD_INPUT;
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
    }
    exit::OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

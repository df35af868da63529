//! `setident` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or a missing prerequisite.
    Usage(String),
    Lib(setident::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<setident::Error> for CliError {
    fn from(e: setident::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_user_error() => 2,
            CliError::Lib(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "setident", version, about = "Set-identifier generative recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory holding every artifact of the run.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation threads.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
    /// Drop the semantic tokens.
    #[arg(long, global = true)]
    no_sem: bool,
    /// Drop the collaborative token.
    #[arg(long, global = true)]
    no_cf: bool,
    /// Keep the query vectors at their seeded random values.
    #[arg(long, global = true)]
    frozen_queries: bool,
    /// Let history tokens see the whole history.
    #[arg(long, global = true)]
    full_mask: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split interactions and resolve semantic features into a snapshot.
    Prepare {
        #[arg(long)]
        interactions: Option<PathBuf>,
        /// Item metadata: `item<TAB>category<TAB>title`.
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        semantic: Option<PathBuf>,
        #[arg(long)]
        synth_seed: Option<u64>,
        /// Write a synthetic interaction log into the run directory and use it.
        #[arg(long)]
        generate: bool,
    },
    /// Fit the collaborative item table on training interactions.
    PretrainCf,
    /// Train the model and write the checkpoint and token corpus.
    Train,
    /// Evaluate the checkpoint in every configured setting.
    Eval {
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Count attention MACs for the flattened and per-query schemes.
    Bench,
    /// Beam search against exhaustive search on random decoders.
    DemoBeam,
    /// Evaluate or retrain over a grid.
    Sweep {
        /// Grounding weights, `start:end:step` or a list; no retraining.
        #[arg(long)]
        beta: Option<String>,
        /// Loss weights; retrains per point.
        #[arg(long)]
        alpha: Option<String>,
        /// Semantic token counts; retrains per point.
        #[arg(long)]
        n_sem: Option<String>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.common.overrides {
        cfg.apply_override(kv)?;
    }
    let c = &cli.common;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    cfg.train.disable_semantic |= c.no_sem;
    cfg.train.disable_cf |= c.no_cf;
    cfg.train.frozen_random_queries |= c.frozen_queries;
    cfg.train.full_attention_mask |= c.full_mask;
    if cfg.train.disable_semantic && cfg.train.disable_cf {
        return Err(CliError::Usage(
            "--no-sem together with --no-cf leaves items with no identifier tokens; drop one of them".into(),
        ));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = build_config(&cli)?;
    let workers = cli.common.workers.max(1);
    match cli.cmd {
        Command::Prepare {
            interactions,
            items,
            semantic,
            synth_seed,
            generate,
        } => {
            if interactions.is_some() {
                cfg.interactions = interactions;
            }
            if items.is_some() {
                cfg.items = items;
            }
            if semantic.is_some() {
                cfg.semantic_vectors = semantic;
                cfg.synth_seed = None;
            }
            if synth_seed.is_some() {
                cfg.synth_seed = synth_seed;
            }
            commands::prepare(&cfg, generate)
        }
        Command::PretrainCf => commands::pretrain_cf(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval { beta } => {
            if beta.is_some() {
                cfg.eval_beta = beta;
            }
            commands::eval(&cfg, workers)
        }
        Command::Bench => commands::bench(&cfg),
        Command::DemoBeam => commands::demo_beam(&cfg),
        Command::Sweep { beta, alpha, n_sem } => {
            if let Some(g) = beta {
                cfg.sweep_beta = Some(config::parse_grid("beta", &g)?);
            }
            if let Some(g) = alpha {
                cfg.sweep_alpha = Some(config::parse_grid("alpha", &g)?);
            }
            if let Some(g) = n_sem {
                cfg.set("sweep_n_sem", &g)?;
            }
            commands::sweep(&cfg, workers)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SETIDENT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

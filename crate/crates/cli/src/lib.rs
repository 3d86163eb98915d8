//! Command-line front end: `synth`, `prepare`, `train`, `embed`, `eval`.

pub mod commands;
pub mod config;
pub mod error;
pub mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_override, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vocalid", version, about = "Self-supervised voice-identity embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, e.g. `--set uniformity_t=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
    /// Do not print the resolved configuration.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic singer corpus.
    Synth(SynthArgs),
    /// Mono conversion and silence trimming of a manifest.
    Prepare(PrepareArgs),
    /// Train an encoder.
    Train(TrainArgs),
    /// Embed clips with a trained checkpoint.
    Embed(EmbedArgs),
    /// Similarity and identification metrics for an embedding file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub singers: Option<usize>,
    #[arg(long)]
    pub clips_per_singer: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// CONT, CONT-VC, UNIF, VICReg or BYOL.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only embed clips of this split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Similarity,
    Probe,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalTask::All)]
    pub task: EvalTask,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only evaluate rows of this split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub mnr_k: Option<usize>,
    #[arg(long)]
    pub mnr_n: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

/// Resolves the configuration: defaults, `--config`, `--set`, `--seed`, then
/// the command's named flags.
pub fn resolve(common: &Common, flags: Vec<(String, String)>) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    push(&mut overrides, "seed", &common.seed);
    overrides.extend(flags);
    let cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    if !common.quiet {
        eprintln!("resolved configuration:\n{}", cfg.to_json());
    }
    Ok(cfg)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Prepare(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Embed(a) => &a.common,
            Command::Eval(a) => &a.common,
        }
    }

    fn flags(&self) -> Vec<(String, String)> {
        let mut f = Vec::new();
        match self {
            Command::Synth(a) => {
                push(&mut f, "singers", &a.singers);
                push(&mut f, "clips_per_singer", &a.clips_per_singer);
                push(&mut f, "clip_seconds", &a.seconds);
            }
            Command::Prepare(_) => {}
            Command::Train(a) => {
                push(&mut f, "loss", &a.loss);
                push(&mut f, "tau", &a.tau);
                push(&mut f, "lr", &a.lr);
                push(&mut f, "weight_decay", &a.weight_decay);
                push(&mut f, "batch_size", &a.batch_size);
                push(&mut f, "segment_seconds", &a.segment_seconds);
                push(&mut f, "max_epochs", &a.max_epochs);
                push(&mut f, "max_steps", &a.max_steps);
                push(&mut f, "patience", &a.patience);
            }
            Command::Embed(a) => push(&mut f, "embed_segment_seconds", &a.segment_seconds),
            Command::Eval(a) => {
                push(&mut f, "pairs", &a.pairs);
                push(&mut f, "mnr_k", &a.mnr_k);
                push(&mut f, "mnr_n", &a.mnr_n);
                push(&mut f, "folds", &a.folds);
            }
        }
        f
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let cfg = resolve(command.common(), command.flags())?;
    match command {
        Command::Synth(a) => commands::synth(&cfg, &a.out),
        Command::Prepare(a) => commands::prepare(&cfg, &a.manifest, &a.out),
        Command::Train(a) => commands::train(&cfg, &a.manifest, &a.out).map(|_| ()),
        Command::Embed(a) => {
            let split = a.split.as_deref().map(parse_split).transpose()?;
            commands::embed(&cfg, &a.checkpoint, &a.manifest, &a.out, split, a.csv.as_deref())
        }
        Command::Eval(a) => {
            let split = a.split.as_deref().map(parse_split).transpose()?;
            let report = commands::eval(&cfg, &a.embeddings, a.task, split)?;
            println!("{}", report.table());
            if let Some(out) = &a.out {
                std::fs::write(out, report.to_json()).map_err(error::data)?;
            }
            Ok(())
        }
    }
}

fn parse_split(s: &str) -> Result<vocalid_core::pairs::Split, CliError> {
    s.parse().map_err(CliError::Config)
}

/// Parses `args` (including the program name) and runs them.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

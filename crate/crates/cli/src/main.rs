//! `ilc`: synthetic data, training, prediction, evaluation and mask
//! scoring for density-map object counting.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure.

mod commands;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, GenSynthArgs, PredictArgs, ScoreMasksArgs, TrainArgs};

const FORMATS: &str = "\
File formats (defined in ilc-core):
  dataset dir      categories.txt, annotations.csv, points.csv, splits.csv,
                   masks.txt, proposals.txt, images/   (ilc_core::synthdata)
  annotations.csv  image_id,path,split,<one raw count column per category>
  checkpoint       .ilck binary: magic, JSON header, f32 tensors   (ilc_core::network)
  prediction dump  CSV image_id,category,score,raw_sum,count       (ilc_core::infer)
  map dump         .ilcd: ILCD, version, C, H, W, f32 values       (ilc_core::infer)
  mask archive     tab-separated run-length masks                  (ilc_core::mask)
  loss log         CSV stage,step,epoch,<loss terms>,total         (ilc_core::train)
  metric report    CSV metric,variant,category,value               (ilc_core::metrics)

Precedence: command-line flags > --config file > built-in defaults.";

#[derive(Debug, Parser)]
#[command(
    name = "ilc",
    version,
    about = "Density-map object counting from image-level lower-count supervision",
    after_help = FORMATS
)]
struct Cli {
    /// TOML config with [data], [network], [train], [synth] and [score]
    /// sections; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice (overrides train.seed and synth.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset.
    GenSynth(GenSynthArgs),
    /// Train stage 1, stage 2 or both.
    Train(TrainArgs),
    /// Count objects in images and optionally dump their maps.
    Predict(PredictArgs),
    /// Compute counting and segmentation metrics.
    Evaluate(EvaluateArgs),
    /// Pick an instance mask per peak from object proposals.
    ScoreMasks(ScoreMasksArgs),
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ilc_core::Error>() {
        Some(ilc_core::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = commands::load_config(cli.config.as_deref(), cli.seed).and_then(|config| match cli.command {
        Command::GenSynth(args) => commands::gen_synth(config, args),
        Command::Train(args) => commands::train(config, args),
        Command::Predict(args) => commands::predict(config, args),
        Command::Evaluate(args) => commands::evaluate(config, args),
        Command::ScoreMasks(args) => commands::score_masks(config, args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

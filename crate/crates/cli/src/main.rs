//! `wsicl`: data generation, training and evaluation for weakly supervised
//! in-context segmentation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use wsicl::error::Error;

#[derive(Debug, Parser)]
#[command(name = "wsicl", version, about = "Weakly supervised in-context segmentation toolkit")]
pub struct Cli {
    /// Seed for data, training and evaluation (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; every artifact and the resolved config go here.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic task families as VOLB files plus a manifest.
    GenData,
    /// Simulate weak prompts for one mask and write the prompt channel.
    SimulatePrompts(SimulateArgs),
    /// Train a model on the training families of a dataset.
    Train(TrainArgs),
    /// Repeated-context Dice on held-out families.
    Eval(EvalArgs),
    /// Evaluate a grid of context sizes and prompts per image.
    Sweep(SweepArgs),
    /// Annotation time against Dice for each sweep setting.
    Efficiency(EfficiencyArgs),
    /// Segment one image from user-supplied prompts on that same image.
    Interactive(InteractiveArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Binary mask (VOLB).
    #[arg(long)]
    pub mask: PathBuf,
    /// box or point.
    #[arg(long = "type")]
    pub prompt_type: Option<String>,
    /// Prompts per image.
    #[arg(short = 'P', long)]
    pub prompts: Option<usize>,
    /// Disable box jitter.
    #[arg(long)]
    pub no_jitter: bool,
    /// Point-sphere radius in voxels.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelData {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint manifest written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Families to evaluate: heldout or train.
    #[arg(long, default_value = "heldout")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: ModelData,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Context size.
    #[arg(short = 'L', long = "context-size")]
    pub context_size: Option<usize>,
    /// Prompts per context image.
    #[arg(short = 'P', long)]
    pub prompts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: ModelData,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated context sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Comma-separated prompts-per-image values.
    #[arg(long = "prompt-counts", value_delimiter = ',')]
    pub prompt_counts: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    /// sweep.csv written by the sweep subcommand.
    #[arg(long)]
    pub sweep: PathBuf,
}

#[derive(Debug, Args)]
pub struct InteractiveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image to segment (VOLB).
    #[arg(long)]
    pub image: PathBuf,
    /// JSON file: {"prompts": [{"type": "box", "slice", "row_min", "row_max", "col_min", "col_max"} | {"type": "point", "slice", "row", "col", "radius"?}]}
    #[arg(long)]
    pub prompt: PathBuf,
    /// Optional reference mask (VOLB) to score the prediction against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

/// Exit status and error label for each failure class.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::InvalidConfig { .. } | Error::UnknownKind(_) => (3, "invalid_config"),
        Error::Io { .. } => (4, "io"),
        Error::Format { .. } | Error::Json { .. } | Error::Checkpoint(_) => (5, "invalid_input"),
        Error::NonFiniteLoss { .. } => (7, "diverged"),
        _ => (6, "invalid_data"),
    }
}

fn report(code: u8, kind: &str, message: String, key: Option<&str>) -> ExitCode {
    let mut line = json!({ "error": kind, "code": code, "message": message });
    if let Some(k) = key {
        line["key"] = json!(k);
    }
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string();
            return report(2, "usage", first, None);
        }
    };
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            let key = match &e {
                Error::InvalidConfig { key, .. } => Some(key.as_str()),
                _ => None,
            };
            report(code, kind, e.to_string(), key)
        }
    }
}

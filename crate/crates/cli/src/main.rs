//! `klgrade`: phantom generation, preprocessing, ensemble training,
//! evaluation, attention maps and metric reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "klgrade", version, about = "Siamese-CNN knee KL grading: train, evaluate, explain")]
struct Cli {
    /// Worker threads for preprocessing, augmentation and member training.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled phantom dataset with manifest and osteophyte masks.
    Synth(SynthArgs),
    /// Write preprocessed images and the patch pairs fed to the network.
    Preprocess(PreprocessArgs),
    /// Train one ensemble member per configured seed.
    Train(TrainArgs),
    /// Evaluate an ensemble on one manifest split.
    Eval(EvalArgs),
    /// Export the ensemble attention map of one image.
    Attention(AttentionArgs),
    /// Recompute the metric report from a prediction file.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Images per grade. Unless overridden, floor(count/7) go to each of
    /// val and test and the rest to train.
    #[arg(long)]
    count: usize,
    /// Images per grade in the validation split.
    #[arg(long)]
    val: Option<usize>,
    /// Images per grade in the test split.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 350)]
    size_px: usize,
    #[arg(long, default_value_t = 0.4)]
    pixel_spacing_mm: f64,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying the preprocessing section (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config file.
    #[arg(long)]
    config: PathBuf,
    /// Replace an existing run directory with the same config hash.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Bundle descriptor or run directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Manifest holding the split (defaults to the training manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (defaults to `<run dir>/eval-<split>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Permit evaluating on the split the bundle was trained on.
    #[arg(long)]
    allow_train_split: bool,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Manifest image id (the image file stem).
    #[arg(long)]
    image_id: String,
    /// Class to explain; the ensemble's predicted grade when omitted.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (defaults to `<run dir>/attention`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Prediction file written by `eval`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a, threads),
        Command::Train(a) => commands::train(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Attention(a) => commands::attention(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

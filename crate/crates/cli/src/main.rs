//! `expcnn`: generate synthetic data, train and evaluate the exposure
//! distortion classifier, check gradients and count parameters.
//!
//! Exit codes: 0 on success, 1 on data or runtime errors, 2 on flag misuse.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "expcnn", version, about = "Exposure-distortion image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of pristine and exposure-shifted PPM images.
    Generate(GenerateArgs),
    /// Train a model on a directory of labeled PPM images.
    Train(TrainArgs),
    /// Evaluate a saved model on a directory of labeled PPM images.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on tiny models.
    Gradcheck(GradcheckArgs),
    /// Print the exact parameter count of an architecture.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Arch {
    Conv,
    Dense,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length in pixels.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(8..))]
    size: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Conv)]
    arch: Arch,
    #[arg(long = "input-size", default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    input_size: u64,
    /// Conv channel widths, or hidden widths for the dense architecture.
    #[arg(long, value_parser = parse_list)]
    channels: Option<Widths>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 0.01, value_parser = parse_positive)]
    lr: f64,
    /// Fraction of the data used for training.
    #[arg(long, default_value_t = 0.8, value_parser = parse_fraction)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the tab-separated report; printed to stdout if omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check one architecture only.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = Arch::Conv)]
    arch: Arch,
    #[arg(long = "input-size", default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    input_size: u64,
    #[arg(long, value_parser = parse_list, conflicts_with = "hidden")]
    channels: Option<Widths>,
    #[arg(long, value_parser = parse_list)]
    hidden: Option<Widths>,
}

/// Comma-separated list of positive layer widths.
#[derive(Clone, Debug)]
struct Widths(Vec<usize>);

fn parse_list(s: &str) -> Result<Widths, String> {
    let values = s
        .split(',')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(0) => Err(format!("layer width must be positive in {s:?}")),
            Ok(v) => Ok(v),
            Err(_) => Err(format!("{p:?} is not a layer width")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Widths(values))
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive number")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("{s:?} must lie strictly between 0 and 1")),
    }
}

/// Reports a flag combination clap cannot express and exits with status 2.
fn usage_error(message: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, message).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::Params(args) => commands::params(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

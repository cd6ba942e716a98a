use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use expcnn_core::data::synth::synth_generate;
use expcnn_core::data::{load_directory, LabelClass};
use expcnn_core::gradcheck::{check_report, tiny_config, TOLERANCE};
use expcnn_core::model_io::{load_model, save_model};
use expcnn_core::training::{evaluate, train as run_training, TrainConfig};
use expcnn_core::{param_count, InputSize, ModelConfig, Variant};

use crate::{usage_error, Arch, EvalArgs, GenerateArgs, GradcheckArgs, ParamsArgs, TrainArgs, Widths};

const DEFAULT_CHANNELS: [usize; 2] = [768, 384];
const DEFAULT_HIDDEN: [usize; 1] = [768];
const ALEXNET_PARAMS: u64 = 61_000_000;
const RESNET50_PARAMS: u64 = 25_600_000;

fn to_usize(v: u64, flag: &str) -> usize {
    usize::try_from(v).unwrap_or_else(|_| usage_error(format!("--{flag} {v} is too large")))
}

fn model_config(arch: Arch, side: u64, widths: Option<Widths>) -> ModelConfig {
    let input = InputSize::square_rgb(to_usize(side, "input-size"));
    let config = match arch {
        Arch::Conv => ModelConfig::conv(
            input,
            &widths.map_or(DEFAULT_CHANNELS.to_vec(), |w| w.0),
        ),
        Arch::Dense => ModelConfig::dense(input, &widths.map_or(DEFAULT_HIDDEN.to_vec(), |w| w.0)),
    };
    if let Err(e) = config.validate() {
        usage_error(e);
    }
    config
}

pub fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let count = to_usize(args.count, "count");
    let entries = synth_generate(&args.out, count, args.seed, to_usize(args.size, "size"))
        .with_context(|| format!("generating images in {}", args.out.display()))?;
    println!("wrote {} images to {}", entries.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let model = model_config(args.arch, args.input_size, args.channels);
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: to_usize(args.batch, "batch"),
        epochs: to_usize(args.epochs, "epochs"),
        train_fraction: args.split,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let side = model.input_size.height;
    let dataset = load_directory(&args.data, (side, side))
        .with_context(|| format!("loading {}", args.data.display()))?;
    let counts = dataset.class_counts();
    let (params, report) = run_training(&model, &config, &dataset).context("training failed")?;

    save_model(&args.out, &model, &params)
        .with_context(|| format!("writing model to {}", args.out.display()))?;
    let tsv = report.to_tsv();
    if let Some(path) = &args.report {
        fs::write(path, &tsv).with_context(|| format!("writing report to {}", path.display()))?;
    }

    println!("model\t{}", model.describe());
    println!("parameters\t{}", report.param_count);
    println!(
        "images\t{} ({} {}, {} {})",
        dataset.len(),
        LabelClass::Exposure.prefix(),
        counts[LabelClass::Exposure.index()],
        LabelClass::Pristine.prefix(),
        counts[LabelClass::Pristine.index()]
    );
    println!("train/test\t{}/{}", report.train_samples, report.test_samples);
    if args.report.is_none() {
        print!("{tsv}");
    } else {
        println!("{}", report.summary_row());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let (model, params) =
        load_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    if model.input_size.channels != 3 {
        bail!(
            "model expects {} input channels but images are RGB",
            model.input_size.channels
        );
    }
    let dataset = load_directory(&args.data, (model.input_size.height, model.input_size.width))
        .with_context(|| format!("loading {}", args.data.display()))?;
    let (loss, acc) = evaluate(&model, &params, &dataset)?;
    println!("{loss:.4}\t{acc:.4}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let variants = match args.arch {
        Some(Arch::Conv) => vec![Variant::Conv],
        Some(Arch::Dense) => vec![Variant::Dense],
        None => vec![Variant::Conv, Variant::Dense],
    };
    let mut passed = true;
    let mut worst = 0.0f64;
    for v in variants {
        let report = check_report(&tiny_config(v), args.seed)?;
        print!("{report}");
        passed &= report.passed();
        worst = worst.max(report.max_rel_error());
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check failed");
        Ok(ExitCode::FAILURE)
    }
}

pub fn params(args: ParamsArgs) -> Result<ExitCode> {
    let widths = match (args.arch, args.channels, args.hidden) {
        (Arch::Conv, _, Some(_)) => usage_error("--hidden applies to --arch dense only"),
        (_, c, h) => c.or(h),
    };
    let model = model_config(args.arch, args.input_size, widths);
    println!("model\t{}", model.describe());
    println!("parameters\t{}", param_count(&model)?);
    println!("AlexNet (reference)\t~{ALEXNET_PARAMS}");
    println!("ResNet50 (reference)\t~{RESNET50_PARAMS}");
    Ok(ExitCode::SUCCESS)
}

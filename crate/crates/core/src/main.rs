use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use report_grounding::domain::{load_dataset, load_predictions, save_predictions, split_by_patient, validate_dataset};
use report_grounding::report::{evaluate, write_overlays};
use report_grounding::synth::{class_histogram, generate_corpus, CorpusConfig};
use report_grounding::trainer::{encode_samples, fit, predict, FitOutputs, TrainConfig};
use report_grounding::vocab::build_vocab;
use report_grounding::{checkpoint, Error, GroundingModel, GroundingSample, ModelConfig, Result};

const SPLIT_RATIOS: (u32, u32, u32) = (7, 1, 2);

#[derive(Parser)]
#[command(name = "report-grounding", version, about = "Ground report phrases in images")]
struct Cli {
    /// Seed for data generation, splitting, initialization and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with training settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: dataset.jsonl plus images/.
    GenData(GenData),
    /// Train on the training split, selecting by validation mIoU.
    Train(Train),
    /// Score predictions against a dataset split.
    Eval(Eval),
    /// Run a checkpoint over a dataset split.
    Predict(Predict),
    /// Draw ground-truth and predicted boxes onto the images.
    Overlay(Overlay),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    patients: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    per_patient: u64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 224, value_parser = clap::value_parser!(u64).range(32..))]
    size: u64,
}

#[derive(Args)]
struct Train {
    /// Dataset file; image paths resolve against its directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, log and split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Predict boxes from the box embedding alone, skipping the image.
    #[arg(long)]
    direct_from_embedding: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    selection: Selection,
    /// Checkpoint to run. Ignored when --predictions is given.
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score an existing predictions file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Predict {
    #[command(flatten)]
    selection: Selection,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Overlay {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn data_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_checked(path: &Path) -> Result<Vec<GroundingSample>> {
    let samples = load_dataset(path)?;
    validate_dataset(&samples)?;
    Ok(samples)
}

fn select(sel: &Selection, seed: u64) -> Result<Vec<GroundingSample>> {
    let samples = load_checked(&sel.data)?;
    if let SplitName::All = sel.split {
        return Ok(samples);
    }
    let split = split_by_patient(&samples, SPLIT_RATIOS, seed)?;
    Ok(match sel.split {
        SplitName::Train => split.train,
        SplitName::Validation => split.validation,
        _ => split.test,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_config(cli: &Cli, args: &Train) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    if let Some(v) = args.steps {
        cfg.total_steps = v;
        cfg.warmup_steps = cfg.warmup_steps.min(v);
    }
    if let Some(v) = args.warmup {
        cfg.warmup_steps = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.accumulation {
        cfg.accumulation_steps = v;
    }
    if let Some(v) = args.micro_batch {
        cfg.micro_batch_size = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen_data(cli: &Cli, args: &GenData) -> Result<()> {
    let config = CorpusConfig {
        n_patients: args.patients as usize,
        samples_per_patient: args.per_patient as usize,
        width: args.size as usize,
        height: args.size as usize,
        seed: cli.seed,
        ..Default::default()
    };
    let samples = generate_corpus(&config, &args.out)?;
    println!("wrote {} samples to {}", samples.len(), args.out.join("dataset.jsonl").display());
    for (class, count) in class_histogram(&samples) {
        println!("  {class:<14} {count}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitIds<'a> {
    train: Vec<&'a str>,
    validation: Vec<&'a str>,
    test: Vec<&'a str>,
}

fn cmd_train(cli: &Cli, args: &Train) -> Result<()> {
    let cfg = train_config(cli, args)?;
    let samples = load_checked(&args.data)?;
    let split = split_by_patient(&samples, SPLIT_RATIOS, cli.seed)?;
    let vocab = build_vocab(split.train.iter().map(|s| s.report.as_str()));
    let mut model_cfg = ModelConfig {
        seed: cli.seed,
        ..Default::default()
    };
    model_cfg.vision.direct_from_embedding = args.direct_from_embedding;
    let model = GroundingModel::new(model_cfg, vocab)?;
    let base = data_dir(&args.data);
    let train = encode_samples(&model, &split.train, base)?;
    let val = encode_samples(&model, &split.validation, base)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    fn ids(v: &[GroundingSample]) -> Vec<&str> {
        v.iter().map(|s| s.id.as_str()).collect()
    }
    write_json(
        &args.out.join("split.json"),
        &SplitIds {
            train: ids(&split.train),
            validation: ids(&split.validation),
            test: ids(&split.test),
        },
    )?;
    let outputs = FitOutputs {
        checkpoint: Some(args.out.join("model.safetensors")),
        log: Some(args.out.join("train_log.jsonl")),
    };
    println!(
        "training {} parameters on {} samples ({} validation) for {} steps",
        model.num_params(),
        train.len(),
        val.len(),
        cfg.total_steps
    );
    let state = fit(&model, &train, &val, &cfg, &outputs)?;
    if let Some(last) = state.history.last() {
        println!(
            "step {}: L_p {:.4} L_l1 {:.4} L_giou {:.4} L_all {:.4}",
            last.step, last.l_p, last.l_l1, last.l_giou, last.l_all
        );
    }
    match state.best_val_miou {
        Some(m) => println!("best validation mIoU {:.4} at step {}", m, state.best_step),
        None => println!("no validation samples; kept the final parameters"),
    }
    println!("checkpoint {}", args.out.join("model.safetensors").display());
    Ok(())
}

fn run_model(checkpoint_path: &Path, sel: &Selection, seed: u64) -> Result<(Vec<GroundingSample>, Vec<report_grounding::Prediction>)> {
    let model = checkpoint::load(checkpoint_path)?;
    let samples = select(sel, seed)?;
    let encoded = encode_samples(&model, &samples, data_dir(&sel.data))?;
    let preds = predict(&model, &encoded)?;
    Ok((samples, preds))
}

fn cmd_eval(cli: &Cli, args: &Eval) -> Result<()> {
    let (samples, preds) = match (&args.predictions, &args.checkpoint) {
        (Some(p), _) => (select(&args.selection, cli.seed)?, load_predictions(p)?),
        (None, Some(c)) => run_model(c, &args.selection, cli.seed)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let report = evaluate(&preds, &samples)?.report();
    write_json(&args.out, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_predict(cli: &Cli, args: &Predict) -> Result<()> {
    let (_, preds) = run_model(&args.checkpoint, &args.selection, cli.seed)?;
    save_predictions(&preds, &args.out)?;
    let with_box = preds.iter().filter(|p| p.box_valid()).count();
    println!("wrote {} predictions ({} with a box) to {}", preds.len(), with_box, args.out.display());
    Ok(())
}

fn cmd_overlay(args: &Overlay) -> Result<()> {
    let samples = load_checked(&args.data)?;
    let preds = load_predictions(&args.predictions)?;
    let summary = write_overlays(&samples, &preds, data_dir(&args.data), &args.out)?;
    for id in &summary.skipped {
        eprintln!("warning: no prediction for {id}, skipped");
    }
    if summary.written.is_empty() {
        return Err(Error::MissingPrediction("every sample".into()));
    }
    println!("wrote {} overlays to {}", summary.written.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Predict(a) => cmd_predict(&cli, a),
        Command::Overlay(a) => cmd_overlay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

//! `csda`: generate benchmarks, train, fine-tune, evaluate, explain and run
//! experiments. Reports go to stdout as JSON; failures exit nonzero with a
//! JSON error object on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csda_autodiff::ParamStore;
use csda_core::eval::{evaluate, export_mask_report, mask_recovery_auc};
use csda_core::experiment::{ablation_suite, run_experiment, ExperimentConfig};
use csda_core::model::Detector;
use csda_core::synth::{generate_synthetic, SynthConfig};
use csda_core::train::{fine_tune_few_shot, TrainConfig, Variant, ZeroShotTrainer};
use csda_core::{load_corpus, save_corpus, DistributionTag};
use serde_json::json;

#[derive(Parser)]
#[command(name = "csda", version, about = "Causal-subgraph fake news detection on propagation graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as train/val/ood JSON-lines corpora.
    Gen {
        /// TOML file with benchmark settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Zero-shot training on in-distribution corpora.
    Train(TrainArgs),
    /// Few-shot fine-tuning with labelled OOD graphs.
    Finetune(FinetuneArgs),
    /// Accuracy and per-class F1 of a checkpoint on a labelled corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Predict with a zeroed biased embedding.
        #[arg(long)]
        infer_zero_bias: bool,
    },
    /// Per-node and per-edge mask scores as JSON lines.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The five-variant ablation ladder.
    Ablate(ExperimentArgs),
    /// A zero-shot, few-shot or ablation experiment over several seeds.
    Experiment(ExperimentArgs),
}

/// Overrides shared by the training commands.
#[derive(Args)]
struct TrainOverrides {
    /// TOML file with training settings; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainOverrides,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Where to write the best checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resumable state file, saved after every epoch and resumed from when
    /// it exists.
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: TrainOverrides,
    /// Zero-shot checkpoint to continue from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// In-distribution training corpus.
    #[arg(long)]
    train: PathBuf,
    /// Labelled OOD corpus.
    #[arg(long)]
    ood: PathBuf,
    /// Where to write the fine-tuned checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Retrain from a fresh initialization instead of the checkpoint.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report file; the report is printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::LADDER
        .into_iter()
        .find(|v| v.name() == name)
        .with_context(|| {
            let names: Vec<_> = Variant::LADDER.iter().map(|v| v.name()).collect();
            format!("unknown variant {name:?}; expected one of {names:?}")
        })
}

fn train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => read_toml(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(v) = &o.variant {
        cfg.variant = parse_variant(v)?;
    }
    if o.log.is_some() {
        cfg.log = o.log.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_detector(path: &Path, infer_zero_bias: bool) -> Result<Detector> {
    let params = ParamStore::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Detector::from_params(&params, infer_zero_bias)?)
}

fn print(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(path) => read_toml(path)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, corpus) in [("train", &data.train), ("val", &data.val), ("ood", &data.ood)] {
        save_corpus(corpus, out_dir.join(format!("{name}.jsonl")))?;
    }
    print(&json!({
        "out_dir": out_dir,
        "train": data.train.len(),
        "val": data.val.len(),
        "ood": data.ood.len(),
    }))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(&args.common)?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    let train = load_corpus(&args.train, DistributionTag::InDistribution)?.in_distribution()?;
    let val = load_corpus(&args.val, DistributionTag::InDistribution)?.in_distribution()?;
    let mut trainer = match &args.state {
        Some(state) if state.exists() => ZeroShotTrainer::resume(&train, &val, &cfg, state)?,
        _ => ZeroShotTrainer::new(&train, &val, &cfg)?,
    };
    while !trainer.is_done() {
        trainer.run_epoch()?;
        if let Some(state) = &args.state {
            trainer.save_state(state)?;
        }
    }
    let out = trainer.finish()?;
    print(&json!({
        "variant": cfg.variant,
        "seed": cfg.seed,
        "epochs_run": out.history.len(),
        "best_epoch": out.best_epoch,
        "best_val_accuracy": out.best_val_accuracy,
        "stopped_early": out.stopped_early,
        "checkpoint": cfg.checkpoint,
    }))
}

fn finetune(args: &FinetuneArgs) -> Result<()> {
    let mut cfg = train_config(&args.common)?;
    cfg.from_scratch |= args.from_scratch;
    cfg.checkpoint = Some(args.out.clone());
    let model = load_detector(&args.checkpoint, cfg.infer_zero_bias)?;
    let train = load_corpus(&args.train, DistributionTag::InDistribution)?.in_distribution()?;
    let ood = load_corpus(&args.ood, DistributionTag::OutOfDistribution)?;
    let out = fine_tune_few_shot(&model, &train, &ood, &cfg)?;
    print(&json!({
        "seed": cfg.seed,
        "epochs_run": out.history.len(),
        "final_losses": out.history.last().map(|r| r.losses),
        "ood_label_reads": ood.training_label_reads(),
        "checkpoint": args.out,
    }))
}

fn eval(checkpoint: &Path, corpus: &Path, infer_zero_bias: bool) -> Result<()> {
    let model = load_detector(checkpoint, infer_zero_bias)?;
    let corpus = load_corpus(corpus, DistributionTag::OutOfDistribution)?;
    let metrics = evaluate(&model, &corpus)?;
    let flagged = corpus.graphs().iter().all(|g| g.causal_flags.is_some());
    let auc = match (model.as_csda(), flagged) {
        (Some(m), true) => Some(mask_recovery_auc(m, &corpus)?),
        _ => None,
    };
    print(&json!({ "metrics": metrics, "mask_auc": auc }))
}

fn explain(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let model = load_detector(checkpoint, false)?;
    let Some(csda) = model.as_csda() else {
        bail!("{} holds a model without masks", checkpoint.display());
    };
    let corpus = load_corpus(corpus, DistributionTag::OutOfDistribution)?;
    let reports = export_mask_report(csda, &corpus, out)?;
    print(&json!({ "graphs": reports.len(), "out": out }))
}

fn experiment(args: &ExperimentArgs, ablate: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let report = if ablate { ablation_suite(&cfg)? } else { run_experiment(&cfg)? };
    if let Some(out) = &args.out {
        report.save(out)?;
    }
    print(&serde_json::to_value(&report)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out_dir, seed } => gen(config.as_deref(), &out_dir, seed),
        Command::Train(a) => train(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Eval {
            checkpoint,
            corpus,
            infer_zero_bias,
        } => eval(&checkpoint, &corpus, infer_zero_bias),
        Command::Explain { checkpoint, corpus, out } => explain(&checkpoint, &corpus, &out),
        Command::Ablate(a) => experiment(&a, true),
        Command::Experiment(a) => experiment(&a, false),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

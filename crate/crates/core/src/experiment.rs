//! Multi-seed experiments: zero-shot transfer, few-shot fine-tuning and the
//! ablation ladder, summarized as JSON reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, mask_recovery_auc, Metrics};
use crate::graph::{load_corpus, Corpus, DistributionTag, InDistCorpus};
use crate::model::Detector;
use crate::split::split_few_shot;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::train::{fine_tune_few_shot, train_zero_shot, TrainConfig, TrainOutcome, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ZeroShot,
    FewShot,
    Ablation,
}

/// Where the graphs come from. Synthetic data is regenerated for every
/// seed with that seed; corpus files are shared by all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Corpus { train: PathBuf, val: PathBuf, ood: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataSource,
    /// Training settings; `seed` and, for ablations, `variant` are set per
    /// run.
    #[serde(default)]
    pub train: TrainConfig,
    /// Share of each OOD class labelled for few-shot fine-tuning.
    #[serde(default = "default_fraction")]
    pub few_shot_fraction: f64,
    /// Directory for per-run checkpoints; none are written when unset.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, seeds: Vec<u64>) -> Self {
        Self {
            kind,
            seeds,
            data: DataSource::default(),
            train: TrainConfig::default(),
            few_shot_fraction: default_fraction(),
            out_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction < 1.0) {
            return Err(Error::Config(format!(
                "few_shot_fraction {} outside (0, 1)",
                self.few_shot_fraction
            )));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub val: Metrics,
    /// OOD test metrics of the final model (after fine-tuning for few-shot
    /// runs, on the unlabelled share of the OOD split).
    pub ood: Metrics,
    /// Zero-shot OOD metrics on the same test share, few-shot runs only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_ood: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    /// Training label reads on the OOD corpus.
    pub ood_label_reads: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub ood_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// One entry per seed; for ablations these are the full-variant runs.
    pub runs: Vec<SeedRun>,
    pub val_accuracy: MeanStd,
    pub ood_accuracy: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_ood_accuracy: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_auc: Option<MeanStd>,
    /// Ladder rows in order, ablations only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    /// Total training label reads on OOD corpora over all runs.
    pub ood_label_reads: usize,
    pub seconds: f64,
}

impl ExperimentReport {
    /// The report with every wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.seconds = 0.0;
        r.runs.iter_mut().for_each(|s| s.seconds = 0.0);
        r
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

struct SeedData {
    train: InDistCorpus,
    val: InDistCorpus,
    ood: Corpus,
    synthetic: bool,
}

fn load_data(source: &DataSource, seed: u64) -> Result<SeedData> {
    match source {
        DataSource::Synthetic(s) => {
            let c = generate_synthetic(&SynthConfig { seed, ..s.clone() })?;
            Ok(SeedData {
                train: c.train.in_distribution()?,
                val: c.val.in_distribution()?,
                ood: c.ood,
                synthetic: true,
            })
        }
        DataSource::Corpus { train, val, ood } => Ok(SeedData {
            train: load_corpus(train, DistributionTag::InDistribution)?.in_distribution()?,
            val: load_corpus(val, DistributionTag::InDistribution)?.in_distribution()?,
            ood: load_corpus(ood, DistributionTag::OutOfDistribution)?,
            synthetic: false,
        }),
    }
}

fn run_config(cfg: &ExperimentConfig, seed: u64, variant: Variant, stage: &str) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = seed;
    t.variant = variant;
    t.log = None;
    t.checkpoint = cfg
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("{}-{stage}-seed{seed}.ckpt", variant.name())));
    t
}

fn auc_if_synthetic(model: &Detector, corpus: &Corpus, synthetic: bool) -> Result<Option<f64>> {
    match (synthetic, model.as_csda()) {
        (true, Some(m)) => mask_recovery_auc(m, corpus).map(Some),
        _ => Ok(None),
    }
}

fn zero_shot_run(cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<(SeedRun, TrainOutcome, SeedData)> {
    let start = Instant::now();
    let data = load_data(&cfg.data, seed)?;
    let out = train_zero_shot(&data.train, &data.val, &run_config(cfg, seed, variant, "zero_shot"))?;
    let run = SeedRun {
        seed,
        val: evaluate(&out.model, &data.val)?,
        ood: evaluate(&out.model, &data.ood)?,
        zero_shot_ood: None,
        mask_auc: auc_if_synthetic(&out.model, &data.ood, data.synthetic)?,
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        ood_label_reads: data.ood.training_label_reads(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((run, out, data))
}

fn few_shot_run(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let (mut run, zero, data) = zero_shot_run(cfg, seed, cfg.train.variant)?;
    let (labelled, test) = split_few_shot(&data.ood, cfg.few_shot_fraction, seed)?;
    let zero_shot_ood = evaluate(&zero.model, &test)?;
    let tuned = fine_tune_few_shot(
        &zero.model,
        &data.train,
        &labelled,
        &run_config(cfg, seed, cfg.train.variant, "few_shot"),
    )?;
    run.val = evaluate(&tuned.model, &data.val)?;
    run.ood = evaluate(&tuned.model, &test)?;
    run.zero_shot_ood = Some(zero_shot_ood);
    run.mask_auc = auc_if_synthetic(&tuned.model, &test, data.synthetic)?;
    run.epochs_run += tuned.history.len();
    run.ood_label_reads += labelled.training_label_reads() + test.training_label_reads();
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}

fn summarize(cfg: &ExperimentConfig, runs: Vec<SeedRun>, ablation: Option<Vec<AblationRow>>, start: Instant) -> ExperimentReport {
    let col = |f: fn(&SeedRun) -> Option<f64>| -> Option<MeanStd> {
        let xs: Option<Vec<f64>> = runs.iter().map(f).collect();
        xs.map(|xs| MeanStd::of(&xs))
    };
    ExperimentReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        val_accuracy: MeanStd::of(&runs.iter().map(|r| r.val.accuracy).collect::<Vec<_>>()),
        ood_accuracy: MeanStd::of(&runs.iter().map(|r| r.ood.accuracy).collect::<Vec<_>>()),
        zero_shot_ood_accuracy: col(|r| r.zero_shot_ood.map(|m| m.accuracy)),
        mask_auc: col(|r| r.mask_auc),
        ablation,
        ood_label_reads: runs.iter().map(|r| r.ood_label_reads).sum(),
        runs,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every seed of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    match cfg.kind {
        ExperimentKind::ZeroShot => {
            let runs = cfg
                .seeds
                .iter()
                .map(|&s| zero_shot_run(cfg, s, cfg.train.variant).map(|r| r.0))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(cfg, runs, None, start))
        }
        ExperimentKind::FewShot => {
            let runs = cfg
                .seeds
                .iter()
                .map(|&s| few_shot_run(cfg, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(cfg, runs, None, start))
        }
        ExperimentKind::Ablation => {
            let mut rows = Vec::with_capacity(Variant::LADDER.len());
            let mut full_runs = Vec::new();
            for variant in Variant::LADDER {
                let mut accs = Vec::with_capacity(cfg.seeds.len());
                for &seed in &cfg.seeds {
                    let (run, _, _) = zero_shot_run(cfg, seed, variant)?;
                    accs.push(run.ood.accuracy);
                    if variant == Variant::Full {
                        full_runs.push(run);
                    }
                }
                let ms = MeanStd::of(&accs);
                rows.push(AblationRow {
                    variant,
                    ood_accuracy: accs,
                    mean: ms.mean,
                    std: ms.std,
                });
            }
            Ok(summarize(cfg, full_runs, Some(rows), start))
        }
    }
}

/// The ablation ladder under the experiment's seeds and data.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(&ExperimentConfig {
        kind: ExperimentKind::Ablation,
        ..cfg.clone()
    })
}

//! Optimization: zero-shot training on in-distribution graphs and few-shot
//! fine-tuning on mixed in-distribution/OOD batches.
//!
//! Every random draw (batch order, swap permutations, OOD cycling) comes
//! from a stream keyed by `(seed, purpose, epoch, step)`, so a run resumed
//! from a state file follows the uninterrupted trajectory exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use csda_autodiff::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{Corpus, InDistCorpus, Label, PropagationGraph};
use crate::model::{Branch, CsdaModel, Detector, Mode, ModelConfig, PlainGcnModel};
use crate::objectives::{
    assemble_losses, ce_loss, supcon_in, supcon_out, swap_augment, LossHyperparams, LossTerms,
    LossValues,
};

/// Which objective terms (and which architecture) a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single GCN on the unmasked graph, cross-entropy only.
    NoCausal,
    PlusBiased,
    PlusCausal,
    PlusCausalAug,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [
        Variant::NoCausal,
        Variant::PlusBiased,
        Variant::PlusCausal,
        Variant::PlusCausalAug,
        Variant::Full,
    ];

    pub fn terms(self) -> LossTerms {
        let upto = |k: usize| LossTerms {
            biased: k >= 1,
            causal: k >= 2,
            causal_aug: k >= 3,
            biased_aug: k >= 4,
        };
        match self {
            Variant::NoCausal => upto(0),
            Variant::PlusBiased => upto(1),
            Variant::PlusCausal => upto(2),
            Variant::PlusCausalAug => upto(3),
            Variant::Full => upto(4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoCausal => "no_causal",
            Variant::PlusBiased => "plus_biased",
            Variant::PlusCausal => "plus_causal",
            Variant::PlusCausalAug => "plus_causal_aug",
            Variant::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub hyper: LossHyperparams,
    pub variant: Variant,
    pub hidden: usize,
    pub score_hidden: usize,
    pub classifier_hidden: usize,
    pub infer_zero_bias: bool,
    pub finetune_epochs: usize,
    /// Fine-tune a freshly initialized model for `epochs` epochs instead of
    /// continuing from the given one.
    pub from_scratch: bool,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: 10,
            hyper: LossHyperparams::default(),
            variant: Variant::Full,
            hidden: 64,
            score_hidden: 32,
            classifier_hidden: 64,
            infer_zero_bias: false,
            finetune_epochs: 20,
            from_scratch: false,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} < 2", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be positive".into());
        }
        if self.hidden == 0 || self.score_hidden == 0 || self.classifier_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        self.hyper.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden: self.hidden,
            score_hidden: self.score_hidden,
            classifier_hidden: self.classifier_hidden,
            infer_zero_bias: self.infer_zero_bias,
        }
    }

    /// Freshly initialized model for this config's variant.
    pub fn init_model(&self, feature_dim: usize) -> Result<Detector> {
        let mc = self.model_config(feature_dim);
        Ok(match self.variant {
            Variant::NoCausal => Detector::NoCausal(PlainGcnModel::new(mc, self.seed)?),
            _ => Detector::Csda(CsdaModel::new(mc, self.seed)?),
        })
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// One update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        let s = &mut self.state;
        s.step += 1;
        let c1 = 1.0 - self.beta1.powi(s.step as i32);
        let c2 = 1.0 - self.beta2.powi(s.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut s.m).zip(&mut s.v) {
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
                *w -= self.learning_rate * (update + self.weight_decay * *w);
            }
        }
    }

    fn export(&self, params: &ParamStore, out: &mut ParamStore) -> Result<()> {
        for ((p, m), v) in params.iter().zip(&self.state.m).zip(&self.state.v) {
            out.insert(format!("optim.m.{}", p.name), m.clone())?;
            out.insert(format!("optim.v.{}", p.name), v.clone())?;
        }
        out.insert("optim.step", Tensor::scalar(self.state.step as f64))?;
        Ok(())
    }

    fn import(&mut self, params: &ParamStore, src: &ParamStore) -> Result<()> {
        let get = |name: String| {
            src.by_name(&name)
                .map(|p| p.value.clone())
                .ok_or_else(|| Error::Config(format!("state file lacks {name}")))
        };
        for (i, p) in params.iter().enumerate() {
            self.state.m[i] = get(format!("optim.m.{}", p.name))?;
            self.state.v[i] = get(format!("optim.v.{}", p.name))?;
        }
        self.state.step = get("optim.step".into())?.item() as u64;
        Ok(())
    }
}

const PURPOSE_BATCHES: u64 = 1;
const PURPOSE_SWAP: u64 = 2;
const PURPOSE_OOD: u64 = 3;

/// Generator keyed by `(seed, purpose, a, b)`.
pub fn derived_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Shuffled index batches for one epoch; a trailing batch smaller than 2
/// is merged into the previous one.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} < 2")));
    }
    if n < 2 {
        return Err(Error::Contract(format!("cannot batch a corpus of {n} graphs")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, PURPOSE_BATCHES, epoch as u64, 0));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    Ok(batches)
}

/// A labelled training batch; the first `n_in` graphs are
/// in-distribution, the rest OOD.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub graphs: Vec<&'a PropagationGraph>,
    pub labels: Vec<Label>,
    pub n_in: usize,
}

impl<'a> Batch<'a> {
    pub fn from_corpus(corpus: &'a Corpus, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            graphs: indices.iter().map(|&i| &corpus.graphs()[i]).collect(),
            labels: indices
                .iter()
                .map(|&i| corpus.training_label(i))
                .collect::<Result<_>>()?,
            n_in: indices.len(),
        })
    }

    fn ids(&self) -> Vec<String> {
        self.graphs.iter().map(|g| g.graph_id.clone()).collect()
    }
}

/// Where a step sits in its run.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    /// Attach the contrastive terms over the batch's in/OOD partition.
    pub contrastive: bool,
}

/// Largest gradient magnitude of `L_biased` on the causal encoder and of
/// `L_causal` on the biased encoder.
pub fn detachment_probe(model: &CsdaModel, batch: &Batch<'_>, seed: u64) -> Result<(f64, f64)> {
    let max_grad = |which: Branch| -> Result<f64> {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let out = model.forward_batch(&mut tape, &p, &batch.graphs, Mode::Train { labels: &batch.labels })?;
        let mut rng = derived_rng(seed, PURPOSE_SWAP, 0, 0);
        let aug = swap_augment(&mut tape, out.z_c, out.z_b, &batch.labels, &mut rng)?;
        let aug_out = model.classify_augmented(&mut tape, &p, &aug)?;
        let bundle = assemble_losses(
            &mut tape,
            &out,
            &aug_out,
            &batch.labels,
            &aug.labels_hat,
            &LossHyperparams::default(),
            LossTerms::FULL,
        )?;
        let (loss, probed) = match which {
            Branch::Causal => (bundle.biased, Branch::Causal),
            Branch::Biased => (bundle.causal, Branch::Biased),
        };
        let grads = tape.backward(loss)?;
        Ok(model
            .encoder_param_ids(probed)
            .into_iter()
            .filter_map(|id| grads.get(p.var(id)))
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max))
    };
    Ok((max_grad(Branch::Causal)?, max_grad(Branch::Biased)?))
}

/// Forward, losses, backward and one optimizer update.
pub fn train_step(
    model: &mut Detector,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    optim: &mut Adam,
    ctx: StepContext,
) -> Result<LossValues> {
    if batch.graphs.len() < 2 {
        return Err(Error::Contract("training batches need at least 2 graphs".into()));
    }
    let mut tape = Tape::new();
    let (values, bound, grads) = match model {
        Detector::Csda(m) => {
            if cfg!(debug_assertions) && ctx.epoch == 0 && ctx.step == 0 {
                let (a, b) = detachment_probe(m, batch, ctx.seed)?;
                if a != 0.0 || b != 0.0 {
                    return Err(Error::Contract(format!(
                        "detachment violated: causal-encoder grad {a}, biased-encoder grad {b}"
                    )));
                }
            }
            let p = m.params.bind(&mut tape, true);
            let out = m.forward_batch(&mut tape, &p, &batch.graphs, Mode::Train { labels: &batch.labels })?;
            let mut rng = derived_rng(ctx.seed, PURPOSE_SWAP, ctx.epoch as u64, ctx.step as u64);
            let aug = swap_augment(&mut tape, out.z_c, out.z_b, &batch.labels, &mut rng)?;
            let aug_out = m.classify_augmented(&mut tape, &p, &aug)?;
            let mut bundle = assemble_losses(
                &mut tape,
                &out,
                &aug_out,
                &batch.labels,
                &aug.labels_hat,
                &cfg.hyper,
                cfg.variant.terms(),
            )?;
            if ctx.contrastive {
                let n = batch.graphs.len();
                let (n_in, n_out) = (batch.n_in, n - batch.n_in);
                if n_in == 0 || n_out == 0 {
                    return Err(Error::Contract("contrastive batch needs both in-distribution and OOD graphs".into()));
                }
                let in_idx: Vec<usize> = (0..n_in).collect();
                let out_idx: Vec<usize> = (n_in..n).collect();
                let z_in = tape.gather_rows(out.z_c, &in_idx)?;
                let z_out = tape.gather_rows(out.z_c, &out_idx)?;
                let (l_in, l_out) = batch.labels.split_at(n_in);
                let tau = cfg.hyper.tau;
                let cl_in = supcon_in(&mut tape, z_in, l_in, tau)?;
                let cl_out = supcon_out(&mut tape, z_out, l_out, z_in, l_in, tau)?;
                bundle = bundle.with_contrastive(&mut tape, cl_in, cl_out, cfg.hyper.gamma)?;
            }
            let values = bundle.values(&tape);
            if !values.is_finite() {
                return Err(non_finite(ctx, batch));
            }
            let grads = tape.backward(bundle.objective)?;
            (values, p, grads)
        }
        Detector::NoCausal(m) => {
            let p = m.params.bind(&mut tape, true);
            let probs = m.forward_batch(&mut tape, &p, &batch.graphs)?;
            let ce = ce_loss(&mut tape, probs, &batch.labels)?;
            let v = tape.value(ce).item();
            let values = LossValues {
                l_causal: v,
                l_dis: v,
                l: v,
                objective: v,
                ..Default::default()
            };
            if !values.is_finite() {
                return Err(non_finite(ctx, batch));
            }
            let grads = tape.backward(ce)?;
            (values, p, grads)
        }
    };
    let params = model.params_mut();
    params.store_grads(&bound, &grads);
    optim.step(params);
    Ok(values)
}

fn non_finite(ctx: StepContext, batch: &Batch<'_>) -> Error {
    Error::NonFiniteLoss {
        epoch: ctx.epoch,
        batch: ctx.step,
        graph_ids: batch.ids(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of every loss component.
    pub losses: LossValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Detector,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
}

fn mean_values(vals: &[LossValues]) -> LossValues {
    let n = vals.len().max(1) as f64;
    let avg = |f: fn(&LossValues) -> f64| vals.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: fn(&LossValues) -> Option<f64>| {
        let xs: Vec<f64> = vals.iter().filter_map(f).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    LossValues {
        l_biased: avg(|v| v.l_biased),
        l_causal: avg(|v| v.l_causal),
        l_dis: avg(|v| v.l_dis),
        l_causal_aug: avg(|v| v.l_causal_aug),
        l_biased_aug: avg(|v| v.l_biased_aug),
        l_swap: avg(|v| v.l_swap),
        l: avg(|v| v.l),
        l_cl_in: avg_opt(|v| v.l_cl_in),
        l_cl_out: avg_opt(|v| v.l_cl_out),
        l_cl: avg_opt(|v| v.l_cl),
        l_en: avg_opt(|v| v.l_en),
        objective: avg(|v| v.objective),
    }
}

/// JSON-lines training log.
struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(BufWriter::new(file))))
    }

    fn write(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| Error::Contract(format!("training log: {e}")))?;
        }
        Ok(())
    }
}

fn step_record(epoch: usize, step: usize, v: &LossValues) -> Result<serde_json::Value> {
    let mut rec = serde_json::to_value(v)?;
    rec["kind"] = "step".into();
    rec["epoch"] = epoch.into();
    rec["step"] = step.into();
    Ok(rec)
}

/// Zero-shot training, one epoch at a time, resumable from a state file.
pub struct ZeroShotTrainer<'a> {
    train: &'a InDistCorpus,
    val: &'a InDistCorpus,
    cfg: TrainConfig,
    model: Detector,
    optim: Adam,
    epoch: usize,
    best: Option<(f64, usize, ParamStore)>,
    bad_epochs: usize,
    history: Vec<EpochRecord>,
    log: Log,
}

impl<'a> ZeroShotTrainer<'a> {
    pub fn new(train: &'a InDistCorpus, val: &'a InDistCorpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !train.is_labelled() || !val.is_labelled() {
            return Err(Error::Contract("training and validation graphs must be labelled".into()));
        }
        let model = cfg.init_model(train.feature_dim())?;
        let optim = Adam::new(cfg, model.params());
        Ok(Self {
            train,
            val,
            cfg: cfg.clone(),
            model,
            optim,
            epoch: 0,
            best: None,
            bad_epochs: 0,
            history: Vec::new(),
            log: Log::open(cfg.log.as_deref(), false)?,
        })
    }

    /// Continues a run saved with [`ZeroShotTrainer::save_state`].
    pub fn resume(
        train: &'a InDistCorpus,
        val: &'a InDistCorpus,
        cfg: &TrainConfig,
        state: impl AsRef<Path>,
    ) -> Result<Self> {
        let mut t = Self::new(train, val, cfg)?;
        t.log = Log::open(cfg.log.as_deref(), true)?;
        let src = ParamStore::load(state)?;
        t.model.params_mut().load_values_from(&src)?;
        let params = t.model.params().clone();
        t.optim.import(&params, &src)?;
        let scalar = |name: &str| {
            src.by_name(name)
                .map(|p| p.value.item())
                .ok_or_else(|| Error::Config(format!("state file lacks {name}")))
        };
        t.epoch = scalar("train.epoch")? as usize;
        t.bad_epochs = scalar("train.bad_epochs")? as usize;
        let best_epoch = scalar("train.best_epoch")?;
        if best_epoch >= 0.0 {
            let mut best = params.clone();
            for p in best.iter_mut() {
                p.value = src
                    .by_name(&format!("best.{}", p.name))
                    .ok_or_else(|| Error::Config(format!("state file lacks best.{}", p.name)))?
                    .value
                    .clone();
            }
            t.best = Some((scalar("train.best_accuracy")?, best_epoch as usize, best));
        }
        Ok(t)
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let params = self.model.params();
        let mut out = params.clone();
        self.optim.export(params, &mut out)?;
        let (acc, epoch) = self.best.as_ref().map_or((-1.0, -1.0), |b| (b.0, b.1 as f64));
        out.insert("train.epoch", Tensor::scalar(self.epoch as f64))?;
        out.insert("train.bad_epochs", Tensor::scalar(self.bad_epochs as f64))?;
        out.insert("train.best_epoch", Tensor::scalar(epoch))?;
        out.insert("train.best_accuracy", Tensor::scalar(acc))?;
        if let Some((_, _, best)) = &self.best {
            for p in best.iter() {
                out.insert(format!("best.{}", p.name), p.value.clone())?;
            }
        }
        Ok(out.save(path)?)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.bad_epochs >= self.cfg.patience
    }

    /// Runs one epoch; returns whether training should continue.
    pub fn run_epoch(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let mut step_values = Vec::new();
        for (step, idx) in make_batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, epoch)?
            .iter()
            .enumerate()
        {
            let batch = Batch::from_corpus(self.train, idx)?;
            let ctx = StepContext {
                seed: self.cfg.seed,
                epoch,
                step,
                contrastive: false,
            };
            let v = train_step(&mut self.model, &batch, &self.cfg, &mut self.optim, ctx)?;
            self.log.write(step_record(epoch, step, &v)?)?;
            step_values.push(v);
        }
        let acc = evaluate(&self.model, self.val)?.accuracy;
        // Ties keep the later checkpoint but only strict gains reset patience.
        match &self.best {
            Some(b) if acc < b.0 => self.bad_epochs += 1,
            Some(b) if acc == b.0 => {
                self.best = Some((acc, epoch, self.model.params().clone()));
                self.bad_epochs += 1;
            }
            _ => {
                self.best = Some((acc, epoch, self.model.params().clone()));
                self.bad_epochs = 0;
            }
        }
        let record = EpochRecord {
            epoch,
            losses: mean_values(&step_values),
            val_accuracy: Some(acc),
            seconds: start.elapsed().as_secs_f64(),
        };
        let mut rec = serde_json::to_value(&record)?;
        rec["kind"] = "epoch".into();
        self.log.write(rec)?;
        self.history.push(record);
        self.epoch += 1;
        Ok(!self.is_done())
    }

    /// Restores the best validation checkpoint and writes it if configured.
    pub fn finish(self) -> Result<TrainOutcome> {
        let stopped_early = self.epoch < self.cfg.epochs;
        let mut model = self.model;
        let (best_val_accuracy, best_epoch) = match self.best {
            Some((acc, epoch, params)) => {
                model.params_mut().load_values_from(&params)?;
                (Some(acc), Some(epoch))
            }
            None => (None, None),
        };
        if let Some(path) = &self.cfg.checkpoint {
            model.params().save(path)?;
        }
        Ok(TrainOutcome {
            model,
            history: self.history,
            best_epoch,
            best_val_accuracy,
            stopped_early,
        })
    }
}

/// Trains on in-distribution graphs only, early-stopping on validation
/// accuracy.
pub fn train_zero_shot(
    train: &InDistCorpus,
    val: &InDistCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = ZeroShotTrainer::new(train, val, cfg)?;
    while trainer.run_epoch()? {}
    trainer.finish()
}

/// Continues training with batches mixing in-distribution graphs and
/// labelled OOD graphs under the enhanced (contrastive) objective.
///
/// Each batch holds `batch_size` in-distribution graphs and
/// `min(batch_size / 2, |OOD|)` OOD graphs drawn cyclically from a
/// reshuffled OOD order. Runs a fixed number of epochs and returns the
/// checkpoint, the starting one included, that scores best on the labelled
/// OOD graphs; later checkpoints win ties.
pub fn fine_tune_few_shot(
    model: &Detector,
    in_dist: &InDistCorpus,
    ood_labelled: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ood_labelled.is_empty() {
        return Err(Error::Contract("fine-tuning needs labelled OOD graphs".into()));
    }
    if !ood_labelled.is_labelled() || !in_dist.is_labelled() {
        return Err(Error::Contract("fine-tuning graphs must be labelled".into()));
    }
    let (mut model, epochs) = if cfg.from_scratch {
        (cfg.init_model(in_dist.feature_dim())?, cfg.epochs)
    } else {
        (model.clone(), cfg.finetune_epochs)
    };
    if !matches!(model, Detector::Csda(_)) {
        return Err(Error::Config("fine-tuning needs the causal/biased model".into()));
    }
    let mut optim = Adam::new(cfg, model.params());
    let mut log = Log::open(cfg.log.as_deref(), false)?;
    let n_out = (cfg.batch_size / 2).clamp(1, ood_labelled.len());
    let mut ood_order: Vec<usize> = Vec::new();
    let mut cycle = 0u64;
    let mut cursor = 0usize;
    let mut history = Vec::with_capacity(epochs);
    let mut best = (evaluate(&model, ood_labelled)?.accuracy, None, model.params().clone());
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut step_values = Vec::new();
        for (step, idx) in make_batches(in_dist.len(), cfg.batch_size, cfg.seed, epoch)?
            .iter()
            .enumerate()
        {
            let mut batch = Batch::from_corpus(in_dist, idx)?;
            for _ in 0..n_out {
                if cursor == ood_order.len() {
                    ood_order = (0..ood_labelled.len()).collect();
                    ood_order.shuffle(&mut derived_rng(cfg.seed, PURPOSE_OOD, cycle, 0));
                    cycle += 1;
                    cursor = 0;
                }
                let j = ood_order[cursor];
                cursor += 1;
                batch.graphs.push(&ood_labelled.graphs()[j]);
                batch.labels.push(ood_labelled.training_label(j)?);
            }
            let ctx = StepContext {
                seed: cfg.seed,
                epoch,
                step,
                contrastive: true,
            };
            let v = train_step(&mut model, &batch, cfg, &mut optim, ctx)?;
            log.write(step_record(epoch, step, &v)?)?;
            step_values.push(v);
        }
        let acc = evaluate(&model, ood_labelled)?.accuracy;
        if acc >= best.0 {
            best = (acc, Some(epoch), model.params().clone());
        }
        let record = EpochRecord {
            epoch,
            losses: mean_values(&step_values),
            val_accuracy: Some(acc),
            seconds: start.elapsed().as_secs_f64(),
        };
        let mut rec = serde_json::to_value(&record)?;
        rec["kind"] = "epoch".into();
        log.write(rec)?;
        history.push(record);
    }
    let (best_val_accuracy, best_epoch, params) = best;
    model.params_mut().load_values_from(&params)?;
    if let Some(path) = &cfg.checkpoint {
        model.params().save(path)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_accuracy: Some(best_val_accuracy),
        stopped_early: false,
    })
}

//! Classification metrics, mask-recovery AUC and mask-score reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Corpus, Label, PropagationGraph};
use crate::model::{CsdaModel, Detector};

/// Graphs per inference batch.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 with TRUE as the positive class.
    pub true_f1: f64,
    /// F1 with FAKE as the positive class.
    pub fake_f1: f64,
    /// `confusion[label][prediction]`, classes ordered TRUE, FAKE.
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn from_predictions(labels: &[Label], predictions: &[Label]) -> Result<Self> {
        if labels.len() != predictions.len() || labels.is_empty() {
            return Err(Error::Contract(format!(
                "{} labels for {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = [[0usize; 2]; 2];
        for (l, p) in labels.iter().zip(predictions) {
            confusion[l.class()][p.class()] += 1;
        }
        let f1 = |c: usize| {
            let tp = confusion[c][c] as f64;
            let fp = confusion[1 - c][c] as f64;
            let fn_ = confusion[c][1 - c] as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        };
        let correct = confusion[0][0] + confusion[1][1];
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            true_f1: f1(Label::True.class()),
            fake_f1: f1(Label::Fake.class()),
            confusion,
        })
    }
}

/// Probability rows for every graph, batched.
pub fn predict(model: &Detector, graphs: &[PropagationGraph]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_BATCH) {
        let refs: Vec<&PropagationGraph> = chunk.iter().collect();
        let probs = model.predict_proba(&refs)?;
        out.extend((0..probs.rows()).map(|r| [probs.get(r, 0), probs.get(r, 1)]));
    }
    Ok(out)
}

/// Argmax class; ties go to TRUE.
pub fn predicted_label(p: &[f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Fake
    } else {
        Label::True
    }
}

pub fn evaluate(model: &Detector, corpus: &Corpus) -> Result<Metrics> {
    let labels = corpus
        .graphs()
        .iter()
        .map(|g| {
            g.label
                .ok_or_else(|| Error::Contract(format!("graph {} has no label", g.graph_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Label> = predict(model, corpus.graphs())?
        .iter()
        .map(predicted_label)
        .collect();
    Metrics::from_predictions(&labels, &preds)
}

/// ROC-AUC of `scores` against binary `flags`, ties counted as half
/// (midrank Mann-Whitney statistic).
pub fn roc_auc(scores: &[f64], flags: &[bool]) -> Result<f64> {
    if scores.len() != flags.len() {
        return Err(Error::Contract("scores and flags differ in length".into()));
    }
    let n_pos = flags.iter().filter(|f| **f).count();
    let n_neg = flags.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("AUC needs both positive and negative nodes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares its mean rank.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| flags[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of node scores against planted causal flags, pooled over graphs.
pub fn mask_recovery_auc(model: &CsdaModel, corpus: &Corpus) -> Result<f64> {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for g in corpus.graphs() {
        let f = g.causal_flags.as_ref().ok_or_else(|| {
            Error::Contract(format!("graph {} has no causal node flags", g.graph_id))
        })?;
        scores.extend(model.mask_scores(g)?.alpha);
        flags.extend_from_slice(f);
    }
    roc_auc(&scores, &flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub index: usize,
    pub alpha: f64,
    pub alpha_full: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causal: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub parent: usize,
    pub child: usize,
    pub beta: f64,
    pub beta_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub graph_id: String,
    pub prediction: Label,
    pub prob_fake: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub nodes: Vec<NodeScore>,
    pub edges: Vec<EdgeScore>,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn mask_reports(model: &CsdaModel, corpus: &Corpus) -> Result<Vec<MaskReport>> {
    let detector = Detector::Csda(model.clone());
    let probs = predict(&detector, corpus.graphs())?;
    corpus
        .graphs()
        .iter()
        .zip(probs)
        .map(|(g, p)| {
            let s = model.mask_scores(g)?;
            let flags = g.causal_flags.as_ref();
            let nodes = s
                .alpha
                .iter()
                .enumerate()
                .map(|(index, &a)| NodeScore {
                    index,
                    alpha: round3(a),
                    alpha_full: a,
                    causal: flags.map(|f| f[index]),
                })
                .collect();
            let edges = g
                .edges
                .iter()
                .zip(&s.beta)
                .map(|(&(parent, child), &b)| EdgeScore {
                    parent,
                    child,
                    beta: round3(b),
                    beta_full: b,
                })
                .collect();
            Ok(MaskReport {
                graph_id: g.graph_id.clone(),
                prediction: predicted_label(&p),
                prob_fake: p[1],
                label: g.label,
                nodes,
                edges,
            })
        })
        .collect()
}

/// Writes one JSON line per graph.
pub fn export_mask_report(
    model: &CsdaModel,
    corpus: &Corpus,
    out: impl AsRef<Path>,
) -> Result<Vec<MaskReport>> {
    let out = out.as_ref();
    let reports = mask_reports(model, corpus)?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for r in &reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(reports)
}

//! The causal/biased subgraph detector and the plain-GCN baseline.
//!
//! Pipeline per graph: GIN node embeddings, sigmoid node and edge scores,
//! soft masks splitting the graph into a causal part (weights `alpha`,
//! `beta`) and a biased part (`1 - alpha`, `1 - beta`), one two-layer GCN
//! per part, and a mask-weighted mean readout. Two MLP classifiers read the
//! concatenated embeddings.

use csda_autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::gin_aggregation_matrix;
use crate::error::{Error, Result};
use crate::graph::{Label, PropagationGraph};
use crate::objectives::{AugmentedOutputs, SwapAugmented};

/// Added to readout denominators.
pub const READOUT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub score_hidden: usize,
    pub classifier_hidden: usize,
    /// At inference, feed zeros instead of the biased embedding to the
    /// causal classifier.
    pub infer_zero_bias: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 64,
            score_hidden: 32,
            classifier_hidden: 64,
            infer_zero_bias: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    /// Uniform fan-in initialization; `gain` 6 for layers feeding a ReLU,
    /// 3 for output layers.
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let bound = (gain / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::new(fan_in, fan_out, w)?)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => tape.add_row(y, p.var(b))?,
            None => y,
        })
    }
}

/// Linear layers with ReLU between them, optionally after the last one too.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
    final_relu: bool,
}

impl Mlp {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        final_relu: bool,
    ) -> Result<Self> {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                // The mask generator starts with small activations so the
                // score sigmoids move gently out of 0.5 during early epochs.
                let gain = if name.starts_with("mask_gen") {
                    1.0
                } else if i < last || final_relu {
                    6.0
                } else {
                    3.0
                };
                Linear::init(store, rng, &format!("{name}.lin{i}"), w[0], w[1], true, gain)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, final_relu })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i + 1 < n || self.final_relu {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    fn zero_output_layer(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("non-empty");
        for id in std::iter::once(last.weight).chain(last.bias) {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Two bias-free GCN layers: `Z' = relu(A_hat Z W)`.
#[derive(Clone, Debug)]
struct GcnEncoder {
    layers: [ParamId; 2],
}

impl GcnEncoder {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let l0 = Linear::init(store, rng, &format!("{name}.layer0"), in_dim, hidden, false, 6.0)?;
        let l1 = Linear::init(store, rng, &format!("{name}.layer1"), hidden, hidden, false, 6.0)?;
        Ok(Self {
            layers: [l0.weight, l1.weight],
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, adj: Var, x: Var) -> Result<Var> {
        let mut z = x;
        for w in self.layers {
            z = gcn_layer(tape, adj, z, p.var(w))?;
        }
        Ok(z)
    }
}

/// One bias-free GCN layer, `relu(A_hat Z W)`.
pub fn gcn_layer(tape: &mut Tape, adj: Var, z: Var, w: Var) -> Result<Var> {
    let zw = tape.matmul(z, w)?;
    let agg = tape.matmul(adj, zw)?;
    Ok(tape.relu(agg)?)
}

/// `sum_i w_i h_i / (sum_i w_i + 1e-8)` for an `N x 1` weight column.
fn weighted_readout(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let num = tape.matmul(wt, h)?;
    let total = tape.sum(w)?;
    let denom = tape.add_scalar(total, READOUT_EPS)?;
    let inv = tape.pow(denom, -1.0)?;
    Ok(tape.scale_rows(num, inv)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Causal,
    Biased,
}

/// Forward mode: training needs labels, inference does not.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Train { labels: &'a [Label] },
    Infer,
}

/// Per-graph tape handles.
#[derive(Clone, Debug)]
pub struct GraphForward {
    /// `N x 1` node scores.
    pub alpha: Var,
    /// `E x 1` edge scores.
    pub beta: Var,
    pub causal_features: Var,
    pub biased_features: Var,
    /// `1 x hidden`.
    pub z_c: Var,
    pub z_b: Var,
}

#[derive(Clone, Debug)]
pub struct BatchOutputs {
    pub graphs: Vec<GraphForward>,
    /// `B x hidden`.
    pub z_c: Var,
    pub z_b: Var,
    /// Training: `C_c(z_c ⊕ detach(z_b))`. Inference: `C_c(z_c ⊕ z_b)`.
    pub probs_causal: Var,
    /// Training only: `C_b(detach(z_c) ⊕ z_b)`.
    pub probs_biased: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskScores {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// One side of a masked graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGraph {
    pub features: Tensor,
    pub edge_weights: Vec<f64>,
    pub self_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGraphPair {
    pub causal: MaskedGraph,
    pub biased: MaskedGraph,
}

/// Soft masking: causal rows scaled by `alpha`, biased rows are the
/// remainder `x - alpha x`, so the two always add back to the input.
pub fn apply_masks(g: &PropagationGraph, scores: &MaskScores) -> Result<MaskedGraphPair> {
    if scores.alpha.len() != g.num_nodes() || scores.beta.len() != g.edges.len() {
        return Err(Error::Contract(format!(
            "scores for {} nodes / {} edges on a graph with {} / {}",
            scores.alpha.len(),
            scores.beta.len(),
            g.num_nodes(),
            g.edges.len()
        )));
    }
    let mut causal = g.features.clone();
    let mut biased = g.features.clone();
    for (r, &a) in scores.alpha.iter().enumerate() {
        let (c_row, b_row) = (causal.row_mut(r), biased.row_mut(r));
        for (c, b) in c_row.iter_mut().zip(b_row.iter_mut()) {
            *c *= a;
            *b -= *c;
        }
    }
    let complement = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
    Ok(MaskedGraphPair {
        causal: MaskedGraph {
            features: causal,
            edge_weights: scores.beta.clone(),
            self_weights: scores.alpha.clone(),
        },
        biased: MaskedGraph {
            features: biased,
            edge_weights: complement(&scores.beta),
            self_weights: complement(&scores.alpha),
        },
    })
}

#[derive(Clone, Debug)]
pub struct CsdaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    gin: Vec<Mlp>,
    node_head: Mlp,
    edge_head: Mlp,
    causal_encoder: GcnEncoder,
    biased_encoder: GcnEncoder,
    causal_cm: Mlp,
    biased_cm: Mlp,
}

impl CsdaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, s, c) = (
            config.feature_dim,
            config.hidden,
            config.score_hidden,
            config.classifier_hidden,
        );
        let gin = vec![
            Mlp::init(&mut store, &mut rng, "mask_gen.gin.layer0", &[d, h, h], true)?,
            Mlp::init(&mut store, &mut rng, "mask_gen.gin.layer1", &[h, h, h], true)?,
        ];
        let node_head = Mlp::init(&mut store, &mut rng, "mask_gen.node_score", &[h, s, 1], false)?;
        let edge_head =
            Mlp::init(&mut store, &mut rng, "mask_gen.edge_score", &[2 * h, s, 1], false)?;
        let causal_encoder = GcnEncoder::init(&mut store, &mut rng, "encoder.causal", d, h)?;
        let biased_encoder = GcnEncoder::init(&mut store, &mut rng, "encoder.biased", d, h)?;
        let causal_cm = Mlp::init(&mut store, &mut rng, "classifier.causal", &[2 * h, c, 2], false)?;
        let biased_cm = Mlp::init(&mut store, &mut rng, "classifier.biased", &[2 * h, c, 2], false)?;
        let mut model = Self {
            config,
            params: store,
            gin,
            node_head,
            edge_head,
            causal_encoder,
            biased_encoder,
            causal_cm,
            biased_cm,
        };
        // Unnormalized GIN sums would otherwise start the score sigmoids
        // saturated; every node and edge starts undecided at 0.5.
        model.zero_score_heads();
        Ok(model)
    }

    /// Rebuilds a model around checkpointed parameters; the feature
    /// dimension is read from the first GIN layer.
    pub fn from_params(params: &ParamStore, infer_zero_bias: bool) -> Result<Self> {
        let first = params
            .by_name("mask_gen.gin.layer0.lin0.weight")
            .ok_or_else(|| Error::Config("checkpoint is not a CSDA model".into()))?;
        let mut config = ModelConfig::new(first.value.rows());
        config.hidden = first.value.cols();
        if let Some(p) = params.by_name("mask_gen.node_score.lin0.weight") {
            config.score_hidden = p.value.cols();
        }
        if let Some(p) = params.by_name("classifier.causal.lin0.weight") {
            config.classifier_hidden = p.value.cols();
        }
        config.infer_zero_bias = infer_zero_bias;
        let mut model = Self::new(config, 0)?;
        model.params.load_values_from(params)?;
        Ok(model)
    }

    /// Zeroes the output layers of both score heads (all scores 0.5).
    pub fn zero_score_heads(&mut self) {
        self.node_head.zero_output_layer(&mut self.params);
        self.edge_head.zero_output_layer(&mut self.params);
    }

    /// Zeroes the output layers of both classifiers (uniform predictions).
    pub fn zero_classifier_heads(&mut self) {
        self.causal_cm.zero_output_layer(&mut self.params);
        self.biased_cm.zero_output_layer(&mut self.params);
    }

    /// Names of the parameters owned by one subgraph encoder.
    pub fn encoder_param_ids(&self, branch: Branch) -> Vec<ParamId> {
        match branch {
            Branch::Causal => self.causal_encoder.layers.to_vec(),
            Branch::Biased => self.biased_encoder.layers.to_vec(),
        }
    }

    /// GIN node embeddings (`N x hidden`) with sum aggregation, epsilon 0.
    pub fn gin_encode(&self, tape: &mut Tape, p: &Bound, g: &PropagationGraph) -> Result<Var> {
        let x = tape.constant(g.features.clone());
        let agg = tape.constant(gin_aggregation_matrix(g));
        let mut h = x;
        for mlp in &self.gin {
            let summed = tape.matmul(agg, h)?;
            h = mlp.forward(tape, p, summed)?;
        }
        Ok(h)
    }

    /// Node scores `N x 1` and directed-edge scores `E x 1`, both in (0, 1).
    pub fn score_masks(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        edges: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let node_logit = self.node_head.forward(tape, p, h)?;
        let alpha = tape.sigmoid(node_logit)?;
        let beta = if edges.is_empty() {
            tape.constant(Tensor::zeros(0, 1))
        } else {
            let parents: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let children: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let hp = tape.gather_rows(h, &parents)?;
            let hc = tape.gather_rows(h, &children)?;
            let pair = tape.concat_cols(&[hp, hc])?;
            let edge_logit = self.edge_head.forward(tape, p, pair)?;
            tape.sigmoid(edge_logit)?
        };
        Ok((alpha, beta))
    }

    /// Full per-graph encoding down to `z_c` and `z_b`.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        g: &PropagationGraph,
    ) -> Result<GraphForward> {
        let h = self.gin_encode(tape, p, g)?;
        let (alpha, beta) = self.score_masks(tape, p, h, &g.edges)?;
        let x = tape.constant(g.features.clone());
        let causal_features = tape.scale_rows(x, alpha)?;
        let biased_features = tape.sub(x, causal_features)?;
        let alpha_b = tape.one_minus(alpha)?;
        let beta_b = tape.one_minus(beta)?;
        let adj_c = tape.normalized_adjacency(beta, alpha, &g.edges)?;
        let adj_b = tape.normalized_adjacency(beta_b, alpha_b, &g.edges)?;
        let nodes_c = self.causal_encoder.forward(tape, p, adj_c, causal_features)?;
        let nodes_b = self.biased_encoder.forward(tape, p, adj_b, biased_features)?;
        let z_c = weighted_readout(tape, nodes_c, alpha)?;
        let z_b = weighted_readout(tape, nodes_b, alpha_b)?;
        Ok(GraphForward {
            alpha,
            beta,
            causal_features,
            biased_features,
            z_c,
            z_b,
        })
    }

    /// `softmax(MLP(z))` for one classification module.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, branch: Branch, z: Var) -> Result<Var> {
        let cm = match branch {
            Branch::Causal => &self.causal_cm,
            Branch::Biased => &self.biased_cm,
        };
        let logits = cm.forward(tape, p, z)?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// Both classifiers on swap-augmented embeddings.
    pub fn classify_augmented(
        &self,
        tape: &mut Tape,
        p: &Bound,
        aug: &SwapAugmented,
    ) -> Result<AugmentedOutputs> {
        Ok(AugmentedOutputs {
            probs_causal: self.classify(tape, p, Branch::Causal, aug.causal_view)?,
            probs_biased: self.classify(tape, p, Branch::Biased, aug.biased_view)?,
        })
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graphs: &[&PropagationGraph],
        mode: Mode<'_>,
    ) -> Result<BatchOutputs> {
        if graphs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Mode::Train { labels } = mode {
            if labels.len() != graphs.len() {
                return Err(Error::Contract(format!(
                    "training batch of {} graphs with {} labels",
                    graphs.len(),
                    labels.len()
                )));
            }
        }
        let per_graph = graphs
            .iter()
            .map(|g| self.encode_graph(tape, p, g))
            .collect::<Result<Vec<_>>>()?;
        let zc_rows: Vec<Var> = per_graph.iter().map(|f| f.z_c).collect();
        let zb_rows: Vec<Var> = per_graph.iter().map(|f| f.z_b).collect();
        let z_c = tape.concat_rows(&zc_rows)?;
        let z_b = tape.concat_rows(&zb_rows)?;
        let (probs_causal, probs_biased) = match mode {
            Mode::Train { .. } => {
                let (zc_live, zb_live) = detached_views(tape, z_c, z_b)?;
                (
                    self.classify(tape, p, Branch::Causal, zc_live)?,
                    Some(self.classify(tape, p, Branch::Biased, zb_live)?),
                )
            }
            Mode::Infer => {
                let zb_in = if self.config.infer_zero_bias {
                    let s = tape.shape(z_b);
                    tape.constant(Tensor::zeros(s[0], s[1]))
                } else {
                    z_b
                };
                let z = tape.concat_cols(&[z_c, zb_in])?;
                (self.classify(tape, p, Branch::Causal, z)?, None)
            }
        };
        Ok(BatchOutputs {
            graphs: per_graph,
            z_c,
            z_b,
            probs_causal,
            probs_biased,
        })
    }

    /// Causal-classifier probabilities (`B x 2`) without gradients.
    pub fn predict_proba(&self, graphs: &[&PropagationGraph]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_batch(&mut tape, &p, graphs, Mode::Infer)?;
        Ok(tape.value(out.probs_causal).clone())
    }

    pub fn mask_scores(&self, g: &PropagationGraph) -> Result<MaskScores> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = self.gin_encode(&mut tape, &p, g)?;
        let (alpha, beta) = self.score_masks(&mut tape, &p, h, &g.edges)?;
        Ok(MaskScores {
            alpha: tape.value(alpha).data().to_vec(),
            beta: tape.value(beta).data().to_vec(),
        })
    }

    /// `(z_c, z_b)` for one graph.
    pub fn embeddings(&self, g: &PropagationGraph) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = self.encode_graph(&mut tape, &p, g)?;
        Ok((
            tape.value(f.z_c).data().to_vec(),
            tape.value(f.z_b).data().to_vec(),
        ))
    }
}

/// `(z_c ⊕ detach(z_b), detach(z_c) ⊕ z_b)`.
pub fn detached_views(tape: &mut Tape, z_c: Var, z_b: Var) -> Result<(Var, Var)> {
    let zb_d = tape.detach(z_b)?;
    let zc_d = tape.detach(z_c)?;
    let causal_live = tape.concat_cols(&[z_c, zb_d])?;
    let biased_live = tape.concat_cols(&[zc_d, z_b])?;
    Ok((causal_live, biased_live))
}

/// Ablation baseline: one GCN on the unmasked graph, mean readout, MLP.
#[derive(Clone, Debug)]
pub struct PlainGcnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: GcnEncoder,
    classifier: Mlp,
}

impl PlainGcnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = GcnEncoder::init(&mut store, &mut rng, "encoder", config.feature_dim, config.hidden)?;
        let classifier = Mlp::init(
            &mut store,
            &mut rng,
            "classifier",
            &[config.hidden, config.classifier_hidden, 2],
            false,
        )?;
        Ok(Self {
            config,
            params: store,
            encoder,
            classifier,
        })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let first = params
            .by_name("encoder.layer0.weight")
            .ok_or_else(|| Error::Config("checkpoint is not a plain GCN model".into()))?;
        let mut config = ModelConfig::new(first.value.rows());
        config.hidden = first.value.cols();
        if let Some(p) = params.by_name("classifier.lin0.weight") {
            config.classifier_hidden = p.value.cols();
        }
        let mut model = Self::new(config, 0)?;
        model.params.load_values_from(params)?;
        Ok(model)
    }

    /// Probabilities `B x 2`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graphs: &[&PropagationGraph],
    ) -> Result<Var> {
        if graphs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(graphs.len());
        for g in graphs {
            let adj = crate::adjacency::normalize_adjacency(
                g,
                &vec![1.0; g.edges.len()],
                &vec![1.0; g.num_nodes()],
            )?;
            let adj = tape.constant(adj.matrix);
            let x = tape.constant(g.features.clone());
            let nodes = self.encoder.forward(tape, p, adj, x)?;
            rows.push(tape.mean_over_rows(nodes)?);
        }
        let z = tape.concat_rows(&rows)?;
        let logits = self.classifier.forward(tape, p, z)?;
        Ok(tape.softmax_rows(logits)?)
    }

    pub fn predict_proba(&self, graphs: &[&PropagationGraph]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let probs = self.forward_batch(&mut tape, &p, graphs)?;
        Ok(tape.value(probs).clone())
    }
}

/// Either model, as trained and evaluated by the experiment runner.
#[derive(Clone, Debug)]
pub enum Detector {
    Csda(CsdaModel),
    NoCausal(PlainGcnModel),
}

impl Detector {
    pub fn params(&self) -> &ParamStore {
        match self {
            Detector::Csda(m) => &m.params,
            Detector::NoCausal(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Detector::Csda(m) => &mut m.params,
            Detector::NoCausal(m) => &mut m.params,
        }
    }

    pub fn predict_proba(&self, graphs: &[&PropagationGraph]) -> Result<Tensor> {
        match self {
            Detector::Csda(m) => m.predict_proba(graphs),
            Detector::NoCausal(m) => m.predict_proba(graphs),
        }
    }

    pub fn as_csda(&self) -> Option<&CsdaModel> {
        match self {
            Detector::Csda(m) => Some(m),
            Detector::NoCausal(_) => None,
        }
    }

    /// Loads either kind of model from a checkpoint.
    pub fn from_params(params: &ParamStore, infer_zero_bias: bool) -> Result<Self> {
        if params.by_name("mask_gen.gin.layer0.lin0.weight").is_some() {
            Ok(Detector::Csda(CsdaModel::from_params(params, infer_zero_bias)?))
        } else {
            Ok(Detector::NoCausal(PlainGcnModel::from_params(params)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize, d: usize, seed: u64) -> PropagationGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        PropagationGraph {
            graph_id: format!("p{seed}"),
            features: Tensor::new(n, d, data).unwrap(),
            edges: (1..n).map(|i| (i - 1, i)).collect(),
            root: 0,
            label: Some(Label::Fake),
            causal_flags: None,
        }
    }

    fn small_config(d: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: d,
            hidden: 8,
            score_hidden: 4,
            classifier_hidden: 6,
            infer_zero_bias: false,
        }
    }

    #[test]
    fn zero_score_heads_give_half() {
        let mut m = CsdaModel::new(small_config(3), 1).unwrap();
        m.zero_score_heads();
        let s = m.mask_scores(&path_graph(4, 3, 2)).unwrap();
        assert!(s.alpha.iter().chain(&s.beta).all(|&v| v == 0.5));
        assert_eq!(s.beta.len(), 3);
    }

    #[test]
    fn scores_in_open_interval_and_pure() {
        let m = CsdaModel::new(small_config(3), 5).unwrap();
        let g = path_graph(6, 3, 9);
        let a = m.mask_scores(&g).unwrap();
        assert!(a.alpha.iter().chain(&a.beta).all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, m.mask_scores(&g).unwrap());
    }

    #[test]
    fn edge_score_depends_on_direction() {
        let mut m = CsdaModel::new(small_config(3), 3).unwrap();
        // Heads start at zero output, which would hide any direction effect.
        for p in m.params.iter_mut().filter(|p| p.name.starts_with("mask_gen.edge_score")) {
            p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.7).sin());
        }
        let g = path_graph(3, 3, 4);
        let mut rev = g.clone();
        rev.edges = vec![(1, 0), (2, 1)];
        rev.root = 2;
        assert_ne!(m.mask_scores(&g).unwrap().beta, m.mask_scores(&rev).unwrap().beta);
    }

    #[test]
    fn apply_masks_extremes() {
        let g = path_graph(3, 2, 1);
        let ones = MaskScores {
            alpha: vec![1.0; 3],
            beta: vec![1.0; 2],
        };
        let pair = apply_masks(&g, &ones).unwrap();
        assert_eq!(pair.causal.features, g.features);
        assert_eq!(pair.causal.edge_weights, vec![1.0; 2]);
        assert!(pair.biased.features.data().iter().all(|&v| v == 0.0));
        let half = MaskScores {
            alpha: vec![0.5; 3],
            beta: vec![0.5; 2],
        };
        let pair = apply_masks(&g, &half).unwrap();
        assert_eq!(pair.causal.features, pair.biased.features);
        assert!(apply_masks(&g, &MaskScores { alpha: vec![0.5], beta: vec![] }).is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform_rows() {
        let mut m = CsdaModel::new(small_config(3), 8).unwrap();
        m.zero_classifier_heads();
        let g1 = path_graph(3, 3, 1);
        let g2 = path_graph(5, 3, 2);
        let p = m.predict_proba(&[&g1, &g2]).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_graph_inference_row_sums_to_one() {
        let m = CsdaModel::new(small_config(3), 8).unwrap();
        let g = path_graph(1, 3, 1);
        let p = m.predict_proba(&[&g]).unwrap();
        assert_eq!(p.shape(), [1, 2]);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert_eq!(p, m.predict_proba(&[&g]).unwrap());
    }

    #[test]
    fn train_mode_requires_labels() {
        let m = CsdaModel::new(small_config(3), 8).unwrap();
        let g = path_graph(3, 3, 1);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, true);
        let err = m.forward_batch(&mut tape, &p, &[&g, &g], Mode::Train { labels: &[Label::Fake] });
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_feature_dim_is_shape_error() {
        let m = CsdaModel::new(small_config(4), 8).unwrap();
        let g = path_graph(3, 3, 1);
        assert!(matches!(m.mask_scores(&g), Err(Error::Autodiff(_))));
    }

    #[test]
    fn from_params_round_trip() {
        let m = CsdaModel::new(small_config(3), 11).unwrap();
        let back = CsdaModel::from_params(&m.params, false).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        let plain = PlainGcnModel::new(small_config(3), 2).unwrap();
        assert!(matches!(
            Detector::from_params(&plain.params, false).unwrap(),
            Detector::NoCausal(_)
        ));
    }
}

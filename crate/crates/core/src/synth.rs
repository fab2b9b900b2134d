//! Synthetic propagation-graph benchmark with a planted causal motif and a
//! planted bias motif.
//!
//! Every graph is a random tree. A connected causal motif shifts channels
//! 0..4 by `causal_strength` in the direction of the label; a disjoint
//! connected bias motif shifts channels 4..8 by `bias_strength` in the
//! direction of a bias label that agrees with the true label with
//! probability `rho_in` (in-distribution splits) or `rho_out` (OOD split).
//! Causal nodes also carry a label-independent marker on channels 8..12, and
//! the causal signal follows the label with probability `causal_fidelity`.
//! All other feature mass is standard-normal noise.

use std::ops::Range;

use csda_autodiff::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Corpus, DistributionTag, Label, PropagationGraph};

pub const CAUSAL_CHANNELS: Range<usize> = 0..4;
pub const BIAS_CHANNELS: Range<usize> = 4..8;
pub const MARKER_CHANNELS: Range<usize> = 8..12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub min_branching: usize,
    pub max_branching: usize,
    pub feature_dim: usize,
    pub causal_motif_size: usize,
    pub bias_motif_size: usize,
    pub causal_strength: f64,
    pub bias_strength: f64,
    /// Label-independent shift on the causal nodes' marker channels.
    pub marker_strength: f64,
    /// Probability that the causal motif points at the true label.
    pub causal_fidelity: f64,
    /// Standard deviation of the background feature noise.
    pub noise_std: f64,
    pub rho_in: f64,
    pub rho_out: f64,
    /// Fraction of graphs labelled fake.
    pub label_balance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_val: 200,
            n_ood: 400,
            min_nodes: 20,
            max_nodes: 60,
            min_branching: 1,
            max_branching: 4,
            feature_dim: 32,
            causal_motif_size: 4,
            bias_motif_size: 8,
            causal_strength: 1.5,
            bias_strength: 5.0,
            marker_strength: 6.0,
            causal_fidelity: 0.97,
            noise_std: 1.0,
            rho_in: 0.95,
            rho_out: 0.5,
            label_balance: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, rho) in [
            ("rho_in", self.rho_in),
            ("rho_out", self.rho_out),
            ("causal_fidelity", self.causal_fidelity),
        ] {
            if !(0.5..=1.0).contains(&rho) {
                return fail(format!("{name} = {rho} outside [0.5, 1]"));
            }
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return fail(format!("bad node range {}..={}", self.min_nodes, self.max_nodes));
        }
        if self.min_branching == 0 || self.min_branching > self.max_branching {
            return fail(format!(
                "bad branching range {}..={}",
                self.min_branching, self.max_branching
            ));
        }
        if self.causal_motif_size == 0 || self.bias_motif_size == 0 {
            return fail("motif sizes must be positive".into());
        }
        if self.causal_motif_size + self.bias_motif_size > self.min_nodes {
            return fail(format!(
                "motifs of {} + {} nodes do not fit in {} nodes",
                self.causal_motif_size, self.bias_motif_size, self.min_nodes
            ));
        }
        if self.feature_dim < MARKER_CHANNELS.end {
            return fail(format!("feature_dim must be at least {}", MARKER_CHANNELS.end));
        }
        if !(self.label_balance > 0.0 && self.label_balance < 1.0) {
            return fail(format!("label_balance {} outside (0, 1)", self.label_balance));
        }
        if self.causal_strength < 0.0
            || self.bias_strength < 0.0
            || self.marker_strength < 0.0
            || self.noise_std < 0.0
        {
            return fail("signal strengths must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpora {
    pub train: Corpus,
    pub val: Corpus,
    pub ood: Corpus,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthCorpora> {
    cfg.validate()?;
    let split = |name: &str, stream: u64, n: usize, rho: f64, tag| -> Result<Corpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let graphs = generate_split(cfg, name, n, rho, &mut rng);
        Corpus::new(graphs, tag)
    };
    Ok(SynthCorpora {
        train: split("train", 1, cfg.n_train, cfg.rho_in, DistributionTag::InDistribution)?,
        val: split("val", 2, cfg.n_val, cfg.rho_in, DistributionTag::InDistribution)?,
        ood: split("ood", 3, cfg.n_ood, cfg.rho_out, DistributionTag::OutOfDistribution)?,
    })
}

fn generate_split(
    cfg: &SynthConfig,
    name: &str,
    n: usize,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<PropagationGraph> {
    let n_fake = (n as f64 * cfg.label_balance).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_fake { Label::Fake } else { Label::True })
        .collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let bias_label = flip_unless(label, rng.random_bool(rho));
            let causal_label = flip_unless(label, rng.random_bool(cfg.causal_fidelity));
            generate_graph(cfg, format!("{name}-{i:05}"), label, causal_label, bias_label, rng)
        })
        .collect()
}

fn flip_unless(l: Label, keep: bool) -> Label {
    match (keep, l) {
        (true, l) => l,
        (false, Label::True) => Label::Fake,
        (false, Label::Fake) => Label::True,
    }
}

fn sign(l: Label) -> f64 {
    match l {
        Label::Fake => 1.0,
        Label::True => -1.0,
    }
}

fn generate_graph(
    cfg: &SynthConfig,
    graph_id: String,
    label: Label,
    causal_label: Label,
    bias_label: Label,
    rng: &mut ChaCha8Rng,
) -> PropagationGraph {
    let (edges, causal, bias) = loop {
        let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let edges = random_tree(n, cfg.min_branching, cfg.max_branching, rng);
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        let mut blocked = vec![false; n];
        let Some(causal) = grow_motif(&neighbors, cfg.causal_motif_size, &blocked, rng) else {
            continue;
        };
        causal.iter().for_each(|&i| blocked[i] = true);
        if let Some(bias) = grow_motif(&neighbors, cfg.bias_motif_size, &blocked, rng) {
            break (edges, causal, bias);
        }
    };
    let n = edges.len() + 1;
    let mut data: Vec<f64> = (0..n * cfg.feature_dim)
        .map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut flags = vec![false; n];
    for &i in &causal {
        flags[i] = true;
        for c in CAUSAL_CHANNELS {
            data[i * cfg.feature_dim + c] += cfg.causal_strength * sign(causal_label);
        }
        for c in MARKER_CHANNELS {
            data[i * cfg.feature_dim + c] += cfg.marker_strength;
        }
    }
    for &i in &bias {
        for c in BIAS_CHANNELS {
            data[i * cfg.feature_dim + c] += cfg.bias_strength * sign(bias_label);
        }
    }
    PropagationGraph {
        graph_id,
        features: Tensor::new(n, cfg.feature_dim, data).expect("sized"),
        edges,
        root: 0,
        label: Some(label),
        causal_flags: Some(flags),
    }
}

/// Breadth-first random tree rooted at 0: each expanded node receives a
/// uniformly drawn number of children until `n` nodes exist.
fn random_tree(n: usize, bmin: usize, bmax: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut next = 1;
    while next < n {
        let parent = queue.pop_front().expect("bmin >= 1 keeps the queue fed");
        let k = rng.random_range(bmin..=bmax).min(n - next);
        for _ in 0..k {
            edges.push((parent, next));
            queue.push_back(next);
            next += 1;
        }
    }
    edges
}

/// Grows a connected node set of `size` avoiding `blocked`, from a random
/// start; gives up after a bounded number of starts.
fn grow_motif(
    neighbors: &[Vec<usize>],
    size: usize,
    blocked: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    let free: Vec<usize> = (0..neighbors.len()).filter(|&i| !blocked[i]).collect();
    for _ in 0..32 {
        let start = *free.choose(rng)?;
        let mut inside = vec![false; neighbors.len()];
        inside[start] = true;
        let mut motif = vec![start];
        let mut frontier: Vec<usize> = Vec::new();
        let extend = |frontier: &mut Vec<usize>, inside: &[bool], node: usize| {
            for &v in &neighbors[node] {
                if !inside[v] && !blocked[v] && !frontier.contains(&v) {
                    frontier.push(v);
                }
            }
        };
        extend(&mut frontier, &inside, start);
        while motif.len() < size && !frontier.is_empty() {
            let pick = frontier.swap_remove(rng.random_range(0..frontier.len()));
            inside[pick] = true;
            motif.push(pick);
            extend(&mut frontier, &inside, pick);
        }
        if motif.len() == size {
            motif.sort_unstable();
            return Some(motif);
        }
    }
    None
}

/// Mean of the given channels over the flagged (or unflagged) nodes.
pub fn channel_mean(g: &PropagationGraph, channels: Range<usize>, nodes: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in nodes {
        total += channels.clone().map(|c| g.features.get(i, c)).sum::<f64>();
    }
    total / (nodes.len() * channels.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 40,
            n_val: 10,
            n_ood: 20,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn graphs_are_valid_trees_with_motifs() {
        let c = generate_synthetic(&small()).unwrap();
        for g in c.train.graphs().iter().chain(c.ood.graphs()) {
            g.validate().unwrap();
            assert_eq!(g.edges.len() + 1, g.num_nodes());
            assert!((20..=60).contains(&g.num_nodes()));
            let flags = g.causal_flags.as_ref().unwrap();
            assert_eq!(flags.iter().filter(|f| **f).count(), 4);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let c = generate_synthetic(&small()).unwrap();
        let fake = c.train.graphs().iter().filter(|g| g.label == Some(Label::Fake)).count();
        assert_eq!(fake, 20);
    }

    #[test]
    fn motif_too_large_is_config_error() {
        let cfg = SynthConfig {
            causal_motif_size: 15,
            bias_motif_size: 10,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rho_out_of_range_is_config_error() {
        let cfg = SynthConfig { rho_out: 0.3, ..small() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_corpora() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }
}

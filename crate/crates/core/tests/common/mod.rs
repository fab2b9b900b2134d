//! Oracles and checks shared by the integration and acceptance tests.
#![allow(dead_code)]

use csda_autodiff::{grad_check_entries, AutodiffError, Bound, GradCheckConfig, Tape, Tensor, Var};
use csda_core::adjacency::normalize_adjacency;
use csda_core::model::{apply_masks, gcn_layer, CsdaModel, MaskScores, ModelConfig, Mode};
use csda_core::objectives::{
    assemble_losses, ce_loss, gce_loss, supcon_in, supcon_out, swap_with_permutation,
    LossHyperparams, LossTerms,
};
use csda_core::train::{detachment_probe, Batch};
use csda_core::{Label, PropagationGraph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one acceptance criterion.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every recursive tree on `n` nodes (node `i > 0` hangs under some
/// `parent < i`), as parent-to-child edge lists.
pub fn recursive_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new()];
    for child in 1..n {
        out = out
            .into_iter()
            .flat_map(|edges: Vec<(usize, usize)>| {
                (0..child).map(move |parent| {
                    let mut e = edges.clone();
                    e.push((parent, child));
                    e
                })
            })
            .collect();
    }
    out
}

pub fn graph_with(edges: Vec<(usize, usize)>, features: Tensor) -> PropagationGraph {
    PropagationGraph {
        graph_id: "g".into(),
        features,
        edges,
        root: 0,
        label: Some(Label::Fake),
        causal_flags: None,
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Random recursive tree with random features.
pub fn random_graph(n: usize, d: usize, label: Label, rng: &mut ChaCha8Rng) -> PropagationGraph {
    let edges = (1..n).map(|c| (rng.random_range(0..c), c)).collect();
    let mut g = graph_with(edges, random_tensor(n, d, rng));
    g.label = Some(label);
    g.graph_id = format!("r{}", rng.random::<u32>());
    g
}

/// Normalized adjacency written out entry by entry.
pub fn brute_adjacency(n: usize, edges: &[(usize, usize)], ew: &[f64], sw: &[f64]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = sw[i];
    }
    for (k, &(u, v)) in edges.iter().enumerate() {
        a[u][v] = ew[k];
        a[v][u] = ew[k];
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>().max(1e-8)).collect();
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect()
}

/// Criterion 4: adjacency (direct and on the tape) and one GCN layer
/// against brute force on every recursive tree up to `max_nodes`.
pub fn adjacency_and_gcn_oracle(max_nodes: usize, seeds: u64) -> Check {
    let (d, h) = (3, 4);
    let mut worst: f64 = 0.0;
    let mut trees = 0;
    for n in 1..=max_nodes {
        for edges in recursive_trees(n) {
            trees += 1;
            for seed in 0..seeds {
                let mut r = rng(seed * 1_000_003 + trees as u64);
                let ew: Vec<f64> = (0..edges.len()).map(|_| r.random_range(0.0..=1.0)).collect();
                let sw: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
                let z = random_tensor(n, d, &mut r);
                let w = random_tensor(d, h, &mut r);
                let g = graph_with(edges.clone(), Tensor::zeros(n, 1));
                let want = brute_adjacency(n, &edges, &ew, &sw);

                let direct = normalize_adjacency(&g, &ew, &sw).unwrap().matrix;
                let mut tape = Tape::new();
                let ew_v = tape.constant(Tensor::column(ew.clone()));
                let sw_v = tape.constant(Tensor::column(sw.clone()));
                let adj = tape.normalized_adjacency(ew_v, sw_v, &edges).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        worst = worst.max((direct.get(i, j) - want[i][j]).abs());
                        worst = worst.max((tape.value(adj).get(i, j) - want[i][j]).abs());
                    }
                }

                let zv = tape.constant(z.clone());
                let wv = tape.constant(w.clone());
                let out = gcn_layer(&mut tape, adj, zv, wv).unwrap();
                let out = tape.value(out);
                for i in 0..n {
                    for c in 0..h {
                        let mut acc = 0.0;
                        for (j, a_ij) in want[i].iter().enumerate() {
                            let zw: f64 = (0..d).map(|k| z.get(j, k) * w.get(k, c)).sum();
                            acc += a_ij * zw;
                        }
                        worst = worst.max((out.get(i, c) - acc.max(0.0)).abs());
                    }
                }
            }
        }
    }
    Check::new(
        worst <= 1e-10,
        format!("{trees} trees x {seeds} seeds, max abs error {worst:.2e}"),
    )
}

pub fn small_model(d: usize, seed: u64) -> CsdaModel {
    let mut cfg = ModelConfig::new(d);
    cfg.hidden = 16;
    cfg.score_hidden = 8;
    cfg.classifier_hidden = 16;
    let mut m = CsdaModel::new(cfg, seed).unwrap();
    // Nonzero score heads so masks differ across nodes.
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params.iter_mut() {
        if p.name.starts_with("mask_gen.node_score") || p.name.starts_with("mask_gen.edge_score") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    m
}

/// Criterion 5: exact mask complementarity and node-reindexing invariance of
/// `z_c` and `z_b`.
pub fn masks_and_reindexing(cases: u64) -> Check {
    let mut complement_ok = true;
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut r = rng(seed);
        let d = 5;
        let model = small_model(d, seed);
        let n = r.random_range(1..=24);
        let g = random_graph(n, d, Label::True, &mut r);
        let scores = model.mask_scores(&g).unwrap();
        let pair = apply_masks(&g, &scores).unwrap();
        for i in 0..n {
            for c in 0..d {
                let sum = pair.causal.features.get(i, c) + pair.biased.features.get(i, c);
                complement_ok &= sum == g.features.get(i, c);
            }
        }
        let (zc, zb) = model.embeddings(&g).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let (pc, pb) = model.embeddings(&g.permuted(&perm)).unwrap();
        for (a, b) in zc.iter().zip(&pc).chain(zb.iter().zip(&pb)) {
            worst = worst.max((a - b).abs());
        }
    }
    Check::new(
        complement_ok && worst < 1e-9,
        format!("{cases} graphs, complement exact: {complement_ok}, max reindexing drift {worst:.2e}"),
    )
}

/// Criterion 2: `|GCE(q = 1e-3) - CE| < 5e-4` on random probability/label
/// pairs. The gap is `q ln(p)^2 / 2` to leading order, so the bound holds
/// exactly when neither class probability drops below `1/e`; rows are drawn
/// from that band.
pub fn gce_ce_limit(pairs: usize) -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let lo = (-1.0f64).exp();
    for _ in 0..pairs {
        let p = r.random_range(lo..1.0 - lo);
        let label = if r.random_bool(0.5) { Label::True } else { Label::Fake };
        let mut row = [1.0 - p; 2];
        row[label.class()] = p;
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&[row.to_vec()]).unwrap());
        let gce = gce_loss(&mut tape, probs, &[label], 1e-3).unwrap();
        let ce = ce_loss(&mut tape, probs, &[label]).unwrap();
        worst = worst.max((tape.value(gce).item() - tape.value(ce).item()).abs());
    }
    Check::new(worst < 5e-4, format!("{pairs} pairs, max |GCE - CE| {worst:.2e}"))
}

/// A labelled batch of `n_in` in-distribution and `n_out` OOD graphs.
pub struct OwnedBatch {
    pub graphs: Vec<PropagationGraph>,
    pub labels: Vec<Label>,
    pub n_in: usize,
}

impl OwnedBatch {
    pub fn random(n_in: usize, n_out: usize, d: usize, r: &mut ChaCha8Rng) -> Self {
        let labels: Vec<Label> = (0..n_in + n_out)
            .map(|i| if i % 2 == 0 { Label::Fake } else { Label::True })
            .collect();
        let graphs = labels
            .iter()
            .map(|&l| {
                let n = r.random_range(2..=7);
                random_graph(n, d, l, r)
            })
            .collect();
        Self { graphs, labels, n_in }
    }

    pub fn view(&self) -> Batch<'_> {
        Batch {
            graphs: self.graphs.iter().collect(),
            labels: self.labels.clone(),
            n_in: self.n_in,
        }
    }
}

/// Every loss of one training step, with a fixed swap order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPick {
    Biased,
    Causal,
    CausalAug,
    BiasedAug,
    ClIn,
    ClOut,
    Enhanced,
}

impl LossPick {
    pub const INDIVIDUAL: [LossPick; 6] = [
        LossPick::Biased,
        LossPick::Causal,
        LossPick::CausalAug,
        LossPick::BiasedAug,
        LossPick::ClIn,
        LossPick::ClOut,
    ];
}

fn step_loss(
    model: &CsdaModel,
    batch: &OwnedBatch,
    perm: &[usize],
    pick: LossPick,
    tape: &mut Tape,
    vars: &[Var],
) -> csda_core::Result<Var> {
    let p = Bound::from_vars(vars.to_vec());
    let graphs: Vec<&PropagationGraph> = batch.graphs.iter().collect();
    let out = model.forward_batch(tape, &p, &graphs, Mode::Train { labels: &batch.labels })?;
    let aug = swap_with_permutation(tape, out.z_c, out.z_b, &batch.labels, perm.to_vec())?;
    let aug_out = model.classify_augmented(tape, &p, &aug)?;
    let hyper = LossHyperparams::default();
    let bundle = assemble_losses(
        tape,
        &out,
        &aug_out,
        &batch.labels,
        &aug.labels_hat,
        &hyper,
        LossTerms::FULL,
    )?;
    let n = batch.labels.len();
    let in_idx: Vec<usize> = (0..batch.n_in).collect();
    let out_idx: Vec<usize> = (batch.n_in..n).collect();
    let z_in = tape.gather_rows(out.z_c, &in_idx)?;
    let z_out = tape.gather_rows(out.z_c, &out_idx)?;
    let (l_in, l_out) = batch.labels.split_at(batch.n_in);
    let cl_in = supcon_in(tape, z_in, l_in, hyper.tau)?;
    let cl_out = supcon_out(tape, z_out, l_out, z_in, l_in, hyper.tau)?;
    let bundle = bundle.with_contrastive(tape, cl_in, cl_out, hyper.gamma)?;
    Ok(match pick {
        LossPick::Biased => bundle.biased,
        LossPick::Causal => bundle.causal,
        LossPick::CausalAug => bundle.causal_aug,
        LossPick::BiasedAug => bundle.biased_aug,
        LossPick::ClIn => cl_in,
        LossPick::ClOut => cl_out,
        LossPick::Enhanced => bundle.objective,
    })
}

/// Largest relative error of tape gradients against central differences,
/// over `per_tensor` sampled entries of every parameter tensor.
pub fn model_grad_error(
    model: &CsdaModel,
    batch: &OwnedBatch,
    perm: &[usize],
    pick: LossPick,
    per_tensor: usize,
    seed: u64,
    rel_tol: f64,
) -> (f64, usize) {
    let inputs: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let mut r = rng(seed);
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut r);
            idx.truncate(per_tensor);
            idx.into_iter().map(move |j| (i, j))
        })
        .collect();
    let cfg = GradCheckConfig {
        step: 1e-5,
        rel_tol,
        abs_floor: 1e-6,
        skip_kinks: true,
    };
    let report = grad_check_entries(
        |tape, vars| {
            step_loss(model, batch, perm, pick, tape, vars).map_err(|e| AutodiffError::Invalid {
                op: "training loss",
                msg: e.to_string(),
            })
        },
        &inputs,
        &entries,
        &cfg,
    )
    .unwrap();
    (report.max_rel_err, report.checked)
}

/// Criterion 1: gradient checks on seeded 3-graph batches (two
/// in-distribution graphs and one OOD graph).
pub fn gradient_checks(cases: u64) -> Check {
    let start = std::time::Instant::now();
    let (mut overall, mut individual): (f64, f64) = (0.0, 0.0);
    let mut checked = 0;
    for seed in 0..cases {
        let mut r = rng(100 + seed);
        let d = 4;
        let model = small_model(d, seed);
        let batch = OwnedBatch::random(2, 1, d, &mut r);
        let mut perm = vec![0, 1, 2];
        while perm == [0, 1, 2] {
            perm.shuffle(&mut r);
        }
        let (e, c) = model_grad_error(&model, &batch, &perm, LossPick::Enhanced, 12, seed, 1e-3);
        overall = overall.max(e);
        checked += c;
        for pick in LossPick::INDIVIDUAL {
            let (e, c) = model_grad_error(&model, &batch, &perm, pick, 6, seed + 7, 1e-4);
            individual = individual.max(e);
            checked += c;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        overall <= 1e-3 && individual <= 1e-4 && secs < 60.0,
        format!(
            "{cases} cases, {checked} entries, max rel error {overall:.2e} (objective), {individual:.2e} (single losses), {secs:.1}s"
        ),
    )
}

/// Criterion 3: both detachment probes are exactly zero.
pub fn detachment_probes(batches: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..batches {
        let mut r = rng(300 + seed);
        let d = 5;
        let model = small_model(d, seed);
        let batch = OwnedBatch::random(r.random_range(2..=6), 0, d, &mut r);
        let (a, b) = detachment_probe(&model, &batch.view(), seed).unwrap();
        worst = worst.max(a).max(b);
    }
    Check::new(worst == 0.0, format!("{batches} batches, max probe gradient {worst:e}"))
}

pub fn scores_for(g: &PropagationGraph, alpha: f64, beta: f64) -> MaskScores {
    MaskScores {
        alpha: vec![alpha; g.num_nodes()],
        beta: vec![beta; g.edges.len()],
    }
}

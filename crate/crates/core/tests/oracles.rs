mod common;

use common::*;
use csda_autodiff::{Tape, Tensor};
use csda_core::eval::{mask_recovery_auc, roc_auc, Metrics};
use csda_core::model::{apply_masks, CsdaModel, ModelConfig};
use csda_core::objectives::{
    bias_conflict_weights, ce_loss, gce_loss, supcon_in, supcon_out, swap_with_permutation,
};
use csda_core::split::split_few_shot;
use csda_core::synth::{channel_mean, generate_synthetic, SynthConfig, BIAS_CHANNELS, CAUSAL_CHANNELS};
use csda_core::{Corpus, Label, PropagationGraph};
use proptest::prelude::*;
use rand::Rng;

fn probs_row(p_true_class: f64, label: Label) -> Vec<f64> {
    let mut row = vec![1.0 - p_true_class; 2];
    row[label.class()] = p_true_class;
    row
}

fn label_of(b: bool) -> Label {
    if b {
        Label::Fake
    } else {
        Label::True
    }
}

#[test]
fn adjacency_and_gcn_match_brute_force_on_small_trees() {
    let c = adjacency_and_gcn_oracle(6, 3);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn recursive_tree_counts() {
    let counts: Vec<usize> = (1..=6).map(|n| recursive_trees(n).len()).collect();
    assert_eq!(counts, [1, 1, 2, 6, 24, 120]);
}

#[test]
fn masks_complement_and_reindexing_is_invisible() {
    let c = masks_and_reindexing(40);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn full_and_empty_masks_route_everything_to_one_side() {
    let mut r = rng(8);
    let g = random_graph(7, 3, Label::True, &mut r);
    let all = apply_masks(&g, &scores_for(&g, 1.0, 1.0)).unwrap();
    assert_eq!(all.causal.features, g.features);
    assert!(all.biased.features.data().iter().all(|&v| v == 0.0));
    let none = apply_masks(&g, &scores_for(&g, 0.0, 0.0)).unwrap();
    assert_eq!(none.biased.features, g.features);
    assert!(none.biased.edge_weights.iter().all(|&w| w == 1.0));
}

#[test]
fn gce_tends_to_ce_as_q_vanishes() {
    let c = gce_ce_limit(300);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn gce_at_even_odds() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
    let l = gce_loss(&mut tape, p, &[Label::Fake], 0.7).unwrap();
    assert!((tape.value(l).item() - 0.549_19).abs() < 1e-5);
}

#[test]
fn detachment_probes_are_zero() {
    let c = detachment_probes(4);
    assert!(c.pass, "{}", c.detail);
}

proptest! {
    #[test]
    fn gce_minus_ce_follows_second_order_expansion(p in 1e-3f64..1.0, fake: bool) {
        let label = label_of(fake);
        let q = 1e-4;
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&[probs_row(p, label)]).unwrap());
        let g = gce_loss(&mut tape, probs, &[label], q).unwrap();
        let c = ce_loss(&mut tape, probs, &[label]).unwrap();
        let gap = tape.value(g).item() - tape.value(c).item();
        let ln = p.ln();
        // (1 - p^q) / q loses a few ulps of p^q, magnified by 1 / q.
        prop_assert!((gap + q * ln * ln / 2.0).abs() < q * q * ln.abs().powi(3) + 1e-15 / q);
    }

    #[test]
    fn gce_gradient_is_ce_gradient_scaled_by_p_to_the_q(p in 0.01f64..0.99, q in 0.05f64..1.0, fake: bool) {
        let label = label_of(fake);
        let grad = |gce: bool| {
            let mut tape = Tape::new();
            let probs = tape.variable(Tensor::from_rows(&[probs_row(p, label)]).unwrap());
            let l = if gce {
                gce_loss(&mut tape, probs, &[label], q).unwrap()
            } else {
                ce_loss(&mut tape, probs, &[label]).unwrap()
            };
            tape.backward(l).unwrap().get(probs).unwrap().get(0, label.class())
        };
        let ratio = grad(true) / grad(false);
        prop_assert!((ratio - p.powf(q)).abs() < 1e-9 * p.powf(q).max(1.0));
    }

    #[test]
    fn gce_is_bounded_and_decreasing(p1 in 0.01f64..0.99, p2 in 0.01f64..0.99, q in 0.05f64..1.0) {
        let value = |p: f64| {
            let mut tape = Tape::new();
            let probs = tape.constant(Tensor::from_rows(&[probs_row(p, Label::True)]).unwrap());
            let l = gce_loss(&mut tape, probs, &[Label::True], q).unwrap();
            tape.value(l).item()
        };
        let (a, b) = (value(p1), value(p2));
        prop_assert!((0.0..=1.0 / q).contains(&a));
        if p1 < p2 {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn weights_lie_in_unit_interval_and_favour_biased_mistakes(
        pc in 0.01f64..0.99, pb in 0.01f64..0.99, fake: bool,
    ) {
        let label = label_of(fake);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_rows(&[probs_row(pc, label)]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[probs_row(pb, label)]).unwrap());
        let w = bias_conflict_weights(&mut tape, c, b, &[label]).unwrap();
        let w = tape.value(w).item();
        let (ce_c, ce_b) = (-pc.ln(), -pb.ln());
        prop_assert!((w - ce_b / (ce_b + ce_c)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn swap_keeps_rows_paired_with_their_labels(seed in 0u64..1000, b in 2usize..7) {
        let mut r = rng(seed);
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let labels: Vec<Label> = (0..b).map(|_| label_of(r.random_bool(0.5))).collect();
        let mut tape = Tape::new();
        let zc = tape.constant(random_tensor(b, 3, &mut r));
        let zb = tape.constant(random_tensor(b, 3, &mut r));
        let aug = swap_with_permutation(&mut tape, zc, zb, &labels, perm.clone()).unwrap();
        let view = tape.value(aug.causal_view).clone();
        for i in 0..b {
            prop_assert_eq!(aug.labels_hat[i], labels[perm[i]]);
            for k in 0..3 {
                prop_assert_eq!(view.get(i, k), tape.value(zc).get(i, k));
                prop_assert_eq!(view.get(i, 3 + k), tape.value(zb).get(perm[i], k));
            }
        }
    }

    #[test]
    fn auc_matches_pair_count_and_ignores_monotone_maps(
        scores in prop::collection::vec(0i32..8, 2..60),
        flags in prop::collection::vec(any::<bool>(), 2..60),
    ) {
        let n = scores.len().min(flags.len());
        let (s, f) = (&scores[..n], &flags[..n]);
        prop_assume!(f.iter().any(|&x| x) && f.iter().any(|&x| !x));
        let s: Vec<f64> = s.iter().map(|&v| v as f64 / 7.0).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if f[i] && !f[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = roc_auc(&s, f).unwrap();
        prop_assert!((auc - wins / pairs).abs() < 1e-12);
        let squashed: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp()).collect();
        prop_assert!((roc_auc(&squashed, f).unwrap() - auc).abs() < 1e-12);
    }

    #[test]
    fn metrics_agree_with_direct_counts(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let labels: Vec<Label> = pairs.iter().map(|p| label_of(p.0)).collect();
        let preds: Vec<Label> = pairs.iter().map(|p| label_of(p.1)).collect();
        let m = Metrics::from_predictions(&labels, &preds).unwrap();
        let hits = pairs.iter().filter(|p| p.0 == p.1).count();
        prop_assert!((m.accuracy - hits as f64 / pairs.len() as f64).abs() < 1e-12);
        let f1 = |class: bool| {
            let tp = pairs.iter().filter(|p| p.0 == class && p.1 == class).count() as f64;
            let fp = pairs.iter().filter(|p| p.0 != class && p.1 == class).count() as f64;
            let fneg = pairs.iter().filter(|p| p.0 == class && p.1 != class).count() as f64;
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) }
        };
        prop_assert!((m.fake_f1 - f1(true)).abs() < 1e-12);
        prop_assert!((m.true_f1 - f1(false)).abs() < 1e-12);
    }
}

#[test]
fn supcon_in_matches_direct_formula() {
    let mut r = rng(4);
    let labels = [Label::True, Label::Fake, Label::True, Label::Fake, Label::True];
    let reps = random_tensor(5, 3, &mut r);
    let tau = 0.5;
    let cos = |a: usize, b: usize| {
        let (x, y) = (reps.row(a), reps.row(b));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let n = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        dot / (n(x) * n(y))
    };
    let mut want = 0.0;
    for i in 0..5 {
        let pos: Vec<usize> = (0..5).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let den: f64 = (0..5).filter(|&j| j != i).map(|j| (cos(i, j) / tau).exp()).sum();
        let s: f64 = pos.iter().map(|&j| (cos(i, j) / tau).exp().ln() - den.ln()).sum();
        want -= s / pos.len() as f64;
    }
    want /= 5.0;
    let mut tape = Tape::new();
    let v = tape.constant(reps.clone());
    let got = supcon_in(&mut tape, v, &labels, tau).unwrap();
    assert!((tape.value(got).item() - want).abs() < 1e-10, "{} vs {want}", tape.value(got).item());
}

#[test]
fn supcon_out_tends_to_log_of_in_count_at_large_temperature() {
    let mut r = rng(5);
    let labels_in = [Label::True, Label::Fake, Label::True, Label::True];
    let labels_out = [Label::Fake, Label::True];
    let mut tape = Tape::new();
    let zi = tape.constant(random_tensor(4, 3, &mut r));
    let zo = tape.constant(random_tensor(2, 3, &mut r));
    let l = supcon_out(&mut tape, zo, &labels_out, zi, &labels_in, 1e6).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-5);
}

fn bias_sum(g: &PropagationGraph) -> f64 {
    let all: Vec<usize> = (0..g.num_nodes()).collect();
    channel_mean(g, BIAS_CHANNELS, &all)
}

fn small_bench(rho_in: f64, rho_out: f64, n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: n,
        n_val: 10,
        n_ood: n,
        min_nodes: 14,
        max_nodes: 24,
        rho_in,
        rho_out,
        seed,
        ..SynthConfig::default()
    }
}

fn agreement(c: &Corpus) -> f64 {
    let hits = c
        .graphs()
        .iter()
        .filter(|g| (bias_sum(g) > 0.0) == (g.label == Some(Label::Fake)))
        .count();
    hits as f64 / c.len() as f64
}

#[test]
fn bias_agreement_follows_rho() {
    let even = generate_synthetic(&small_bench(0.5, 0.5, 1200, 1)).unwrap();
    assert!((agreement(&even.train) - 0.5).abs() <= 0.05);
    assert!((agreement(&even.ood) - 0.5).abs() <= 0.05);
    let skewed = generate_synthetic(&small_bench(0.95, 0.5, 1200, 2)).unwrap();
    assert!((agreement(&skewed.train) - 0.95).abs() <= 0.02);
}

/// Best single-threshold accuracy, either orientation.
fn best_threshold_accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    // Predict positive above the cut; start with everything positive.
    let mut correct = positives;
    let mut best = correct.max(n - correct);
    for &i in &order {
        correct += if labels[i] { -1.0 } else { 1.0 };
        best = best.max(correct).max(n - correct);
    }
    best / n
}

#[test]
fn ood_bias_channel_is_uninformative_and_causal_channel_is_not() {
    let c = generate_synthetic(&small_bench(0.95, 0.5, 2000, 3)).unwrap();
    let labels: Vec<bool> = c.ood.graphs().iter().map(|g| g.label == Some(Label::Fake)).collect();
    let bias: Vec<f64> = c.ood.graphs().iter().map(bias_sum).collect();
    assert!((best_threshold_accuracy(&bias, &labels) - 0.5).abs() <= 0.05);
    let causal: Vec<f64> = c
        .ood
        .graphs()
        .iter()
        .map(|g| {
            let flagged: Vec<usize> = (0..g.num_nodes())
                .filter(|&i| g.causal_flags.as_ref().unwrap()[i])
                .collect();
            channel_mean(g, CAUSAL_CHANNELS, &flagged)
        })
        .collect();
    assert!(best_threshold_accuracy(&causal, &labels) >= 0.9);
}

#[test]
fn few_shot_split_is_stratified_and_disjoint() {
    let c = generate_synthetic(&small_bench(0.95, 0.5, 100, 4)).unwrap();
    let (labelled, test) = split_few_shot(&c.ood, 0.2, 9).unwrap();
    assert_eq!(labelled.len() + test.len(), c.ood.len());
    let ids = |x: &Corpus| x.graphs().iter().map(|g| g.graph_id.clone()).collect::<Vec<_>>();
    assert!(ids(&labelled).iter().all(|i| !ids(&test).contains(i)));
    let fakes = |x: &Corpus| x.graphs().iter().filter(|g| g.label == Some(Label::Fake)).count();
    assert_eq!(fakes(&labelled), (fakes(&c.ood) as f64 * 0.2).round() as usize);
}

#[test]
fn untrained_mask_auc_is_a_valid_probability() {
    let c = generate_synthetic(&small_bench(0.95, 0.5, 20, 5)).unwrap();
    let model = CsdaModel::new(ModelConfig::new(c.ood.feature_dim()), 1).unwrap();
    let auc = mask_recovery_auc(&model, &c.ood).unwrap();
    // Zeroed score heads give every node 0.5.
    assert_eq!(auc, 0.5);
}

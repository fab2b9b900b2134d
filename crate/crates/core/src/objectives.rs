//! Loss functions: generalized cross-entropy for the biased branch,
//! reweighted cross-entropy for the causal branch, the swap augmentation,
//! the supervised contrastive terms and their combinations.

use csda_autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Label;
use crate::model::{detached_views, BatchOutputs};

/// Floor for the reweighting denominator.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyperparams {
    /// GCE exponent in (0, 1].
    pub q: f64,
    /// Weight of the supervised objective against the contrastive one.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            q: 0.7,
            gamma: 0.2,
            tau: 0.1,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("GCE exponent q = {q} outside (0, 1]")))
    }
}

fn classes(labels: &[Label]) -> Vec<usize> {
    labels.iter().map(|l| l.class()).collect()
}

/// `p_y` for every row, as a `B x 1` column.
fn true_class_probs(tape: &mut Tape, probs: Var, labels: &[Label]) -> Result<Var> {
    Ok(tape.pick_cols(probs, &classes(labels))?)
}

/// Mean of `(1 - p_y^q) / q`.
pub fn gce_loss(tape: &mut Tape, probs: Var, labels: &[Label], q: f64) -> Result<Var> {
    check_q(q)?;
    let py = true_class_probs(tape, probs, labels)?;
    let powed = tape.pow(py, q)?;
    let per = tape.affine(powed, -1.0 / q, 1.0 / q)?;
    Ok(tape.mean(per)?)
}

/// Per-sample cross-entropy `-ln p_y` as a `B x 1` column.
pub fn ce_per_sample(tape: &mut Tape, probs: Var, labels: &[Label]) -> Result<Var> {
    let py = true_class_probs(tape, probs, labels)?;
    let log = tape.log(py)?;
    Ok(tape.scale(log, -1.0)?)
}

pub fn ce_loss(tape: &mut Tape, probs: Var, labels: &[Label]) -> Result<Var> {
    let per = ce_per_sample(tape, probs, labels)?;
    Ok(tape.mean(per)?)
}

/// `W = CE_b / max(CE_b + CE_c, 1e-12)` from detached cross-entropies, as a
/// constant `B x 1` column.
pub fn bias_conflict_weights(
    tape: &mut Tape,
    probs_causal: Var,
    probs_biased: Var,
    labels: &[Label],
) -> Result<Var> {
    let ce_c = ce_per_sample(tape, probs_causal, labels)?;
    let ce_b = ce_per_sample(tape, probs_biased, labels)?;
    let ce_c = tape.detach(ce_c)?;
    let ce_b = tape.detach(ce_b)?;
    let w: Vec<f64> = tape
        .value(ce_b)
        .data()
        .iter()
        .zip(tape.value(ce_c).data())
        .map(|(&b, &c)| b / (b + c).max(WEIGHT_FLOOR))
        .collect();
    Ok(tape.constant(Tensor::column(w)))
}

/// Mean of `W * CE_c`, gradients flowing only through `CE_c`.
pub fn reweighted_ce_loss(
    tape: &mut Tape,
    probs_causal: Var,
    probs_biased: Var,
    labels: &[Label],
) -> Result<Var> {
    let w = bias_conflict_weights(tape, probs_causal, probs_biased, labels)?;
    let ce_c = ce_per_sample(tape, probs_causal, labels)?;
    let weighted = tape.mul(w, ce_c)?;
    Ok(tape.mean(weighted)?)
}

/// Result of permuting biased embeddings (and labels) within a batch.
#[derive(Clone, Debug)]
pub struct SwapAugmented {
    /// `perm[i]` is the source row placed at row `i`.
    pub perm: Vec<usize>,
    /// `z_c ⊕ detach(z_b[perm])`, read by the causal classifier.
    pub causal_view: Var,
    /// `detach(z_c) ⊕ z_b[perm]`, read by the biased classifier.
    pub biased_view: Var,
    /// `y[perm]`.
    pub labels_hat: Vec<Label>,
}

pub fn swap_augment<R: Rng + ?Sized>(
    tape: &mut Tape,
    z_c: Var,
    z_b: Var,
    labels: &[Label],
    rng: &mut R,
) -> Result<SwapAugmented> {
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    perm.shuffle(rng);
    swap_with_permutation(tape, z_c, z_b, labels, perm)
}

/// Swap augmentation with a given permutation.
pub fn swap_with_permutation(
    tape: &mut Tape,
    z_c: Var,
    z_b: Var,
    labels: &[Label],
    perm: Vec<usize>,
) -> Result<SwapAugmented> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::Contract(format!("swap augmentation needs a batch of at least 2, got {b}")));
    }
    let mut seen = vec![false; b];
    if perm.len() != b || !perm.iter().all(|&i| i < b && !std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Contract("swap order is not a permutation of the batch".into()));
    }
    if tape.shape(z_b)[0] != b || tape.shape(z_c)[0] != b {
        return Err(Error::Contract("embeddings and labels disagree on batch size".into()));
    }
    let zb_hat = tape.gather_rows(z_b, &perm)?;
    let (causal_view, biased_view) = detached_views(tape, z_c, zb_hat)?;
    let labels_hat = perm.iter().map(|&i| labels[i]).collect();
    Ok(SwapAugmented {
        perm,
        causal_view,
        biased_view,
        labels_hat,
    })
}

/// Classifier outputs on the swapped embeddings.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedOutputs {
    pub probs_causal: Var,
    pub probs_biased: Var,
}

/// Which supervised terms drive the optimizer; the bundle always reports
/// all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub biased: bool,
    pub causal: bool,
    pub causal_aug: bool,
    pub biased_aug: bool,
}

impl LossTerms {
    pub const FULL: Self = Self {
        biased: true,
        causal: true,
        causal_aug: true,
        biased_aug: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLosses {
    pub cl_in: Var,
    pub cl_out: Var,
    pub cl: Var,
    pub en: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub biased: Var,
    pub causal: Var,
    pub dis: Var,
    pub causal_aug: Var,
    pub biased_aug: Var,
    pub swap: Var,
    /// `dis + swap`.
    pub total: Var,
    pub contrastive: Option<ContrastiveLosses>,
    /// What gets differentiated: the sum of the selected terms, or the
    /// enhanced objective once contrastive terms are attached.
    pub objective: Var,
}

/// Scalar snapshot of a bundle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_biased: f64,
    pub l_causal: f64,
    pub l_dis: f64,
    pub l_causal_aug: f64,
    pub l_biased_aug: f64,
    pub l_swap: f64,
    pub l: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cl_in: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cl_out: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_en: Option<f64>,
    pub objective: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [
            self.l_biased,
            self.l_causal,
            self.l_causal_aug,
            self.l_biased_aug,
            self.l,
            self.objective,
        ]
        .iter()
        .chain(self.l_cl.iter())
        .chain(self.l_en.iter())
        .all(|v| v.is_finite())
    }
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            l_biased: v(self.biased),
            l_causal: v(self.causal),
            l_dis: v(self.dis),
            l_causal_aug: v(self.causal_aug),
            l_biased_aug: v(self.biased_aug),
            l_swap: v(self.swap),
            l: v(self.total),
            l_cl_in: self.contrastive.map(|c| v(c.cl_in)),
            l_cl_out: self.contrastive.map(|c| v(c.cl_out)),
            l_cl: self.contrastive.map(|c| v(c.cl)),
            l_en: self.contrastive.map(|c| v(c.en)),
            objective: v(self.objective),
        }
    }

    /// Adds the contrastive terms and makes `L_en` the objective.
    pub fn with_contrastive(
        mut self,
        tape: &mut Tape,
        cl_in: Var,
        cl_out: Var,
        gamma: f64,
    ) -> Result<Self> {
        let cl = tape.add(cl_in, cl_out)?;
        let en = enhanced_total(tape, self.total, cl, gamma)?;
        self.contrastive = Some(ContrastiveLosses { cl_in, cl_out, cl, en });
        self.objective = en;
        Ok(self)
    }
}

pub fn assemble_losses(
    tape: &mut Tape,
    outputs: &BatchOutputs,
    augmented: &AugmentedOutputs,
    labels: &[Label],
    labels_hat: &[Label],
    hyper: &LossHyperparams,
    terms: LossTerms,
) -> Result<LossBundle> {
    let probs_biased = outputs
        .probs_biased
        .ok_or_else(|| Error::Contract("losses need training-mode outputs".into()))?;
    let biased = gce_loss(tape, probs_biased, labels, hyper.q)?;
    let causal = reweighted_ce_loss(tape, outputs.probs_causal, probs_biased, labels)?;
    let dis = tape.add(biased, causal)?;
    // The swapped view reuses the weights of the original samples; weights
    // recomputed on the swapped view would favour anti-bias predictions.
    let causal_aug = {
        let w = bias_conflict_weights(tape, outputs.probs_causal, probs_biased, labels)?;
        let ce = ce_per_sample(tape, augmented.probs_causal, labels)?;
        let m = tape.mul(w, ce)?;
        tape.mean(m)?
    };
    let biased_aug = gce_loss(tape, augmented.probs_biased, labels_hat, hyper.q)?;
    let swap = tape.add(causal_aug, biased_aug)?;
    let total = tape.add(dis, swap)?;
    let objective = if terms == LossTerms::FULL {
        total
    } else {
        let picked: Vec<Var> = [
            (terms.biased, biased),
            (terms.causal, causal),
            (terms.causal_aug, causal_aug),
            (terms.biased_aug, biased_aug),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, v)| *v)
        .collect();
        let mut acc = *picked
            .first()
            .ok_or_else(|| Error::Config("no loss term selected".into()))?;
        for v in &picked[1..] {
            acc = tape.add(acc, *v)?;
        }
        acc
    };
    Ok(LossBundle {
        biased,
        causal,
        dis,
        causal_aug,
        biased_aug,
        swap,
        total,
        contrastive: None,
        objective,
    })
}

/// Cosine similarity with norms floored at 1e-12.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Shared core of both contrastive losses.
///
/// `sims` is the `A x K` cosine matrix between anchors and candidates,
/// `positive[a][k]` marks positives and `in_denominator[a][k]` the
/// candidates summed in each anchor's denominator. Scores are shifted by
/// `-1/tau` (the largest possible value) before exponentiation.
fn contrastive_from_sims(
    tape: &mut Tape,
    sims: Var,
    positive: &[Vec<bool>],
    in_denominator: &[Vec<bool>],
    tau: f64,
) -> Result<Var> {
    let [a, k] = tape.shape(sims);
    let scaled = tape.affine(sims, 1.0 / tau, -1.0 / tau)?;
    let e = tape.exp(scaled)?;
    let mask = Tensor::new(
        a,
        k,
        in_denominator.iter().flatten().map(|&m| f64::from(u8::from(m))).collect(),
    )?;
    let mask = tape.constant(mask);
    let masked = tape.mul(e, mask)?;
    let den = tape.row_sums(masked)?;
    let log_den = tape.log(den)?;

    let outer = 1.0 / a as f64;
    let mut coef = Tensor::zeros(a, k);
    let mut anchor_w = Tensor::zeros(a, 1);
    for (n, row) in positive.iter().enumerate() {
        let count = row.iter().filter(|p| **p).count();
        if count == 0 {
            continue;
        }
        anchor_w.set(n, 0, outer);
        for (m, &p) in row.iter().enumerate() {
            if p {
                coef.set(n, m, outer / count as f64);
            }
        }
    }
    let coef = tape.constant(coef);
    let anchor_w = tape.constant(anchor_w);
    let pos_term = tape.mul(scaled, coef)?;
    let pos_sum = tape.sum(pos_term)?;
    let den_term = tape.mul(log_den, anchor_w)?;
    let den_sum = tape.sum(den_term)?;
    Ok(tape.sub(den_sum, pos_sum)?)
}

fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.normalize_rows(a)?;
    let nb = tape.normalize_rows(b)?;
    let nbt = tape.transpose(nb)?;
    Ok(tape.matmul(na, nbt)?)
}

/// Supervised contrastive loss among in-distribution representations:
/// positives share the anchor's label, the denominator runs over every
/// other sample, anchors without positives contribute 0 to the `1/N` mean.
pub fn supcon_in(tape: &mut Tape, reps: Var, labels: &[Label], tau: f64) -> Result<Var> {
    let n = labels.len();
    if n < 2 || tape.shape(reps)[0] != n {
        return Err(Error::Contract(format!(
            "in-distribution contrastive term needs at least 2 labelled representations, got {n}"
        )));
    }
    let sims = cosine_matrix(tape, reps, reps)?;
    let positive: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let others: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| j != i).collect()).collect();
    contrastive_from_sims(tape, sims, &positive, &others, tau)
}

/// Contrastive loss pulling OOD anchors toward in-distribution samples of
/// the same label; the denominator runs over all in-distribution samples.
pub fn supcon_out(
    tape: &mut Tape,
    reps_out: Var,
    labels_out: &[Label],
    reps_in: Var,
    labels_in: &[Label],
    tau: f64,
) -> Result<Var> {
    let (n_out, n_in) = (labels_out.len(), labels_in.len());
    if n_out == 0 || n_in == 0 {
        return Err(Error::Contract(
            "OOD contrastive term needs OOD and in-distribution samples".into(),
        ));
    }
    if tape.shape(reps_out)[0] != n_out || tape.shape(reps_in)[0] != n_in {
        return Err(Error::Contract("representations and labels disagree in count".into()));
    }
    let sims = cosine_matrix(tape, reps_out, reps_in)?;
    let positive: Vec<Vec<bool>> = labels_out
        .iter()
        .map(|lo| labels_in.iter().map(|li| li == lo).collect())
        .collect();
    let all = vec![vec![true; n_in]; n_out];
    contrastive_from_sims(tape, sims, &positive, &all, tau)
}

/// `gamma * L + (1 - gamma) * L_CL`.
pub fn enhanced_total(tape: &mut Tape, l: Var, l_cl: Var, gamma: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let a = tape.scale(l, gamma)?;
    let b = tape.scale(l_cl, 1.0 - gamma)?;
    Ok(tape.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, True};

    fn probs(tape: &mut Tape, rows: &[[f64; 2]]) -> Var {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        tape.constant(Tensor::from_rows(&rows).unwrap())
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn gce_examples() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[[0.0, 1.0]]);
        let l = gce_loss(&mut t, p, &[Fake], 0.7).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let p = probs(&mut t, &[[0.5, 0.5]]);
        let l = gce_loss(&mut t, p, &[True], 0.7).unwrap();
        assert!((scalar(&t, l) - 0.549_19).abs() < 1e-5);
        assert!(matches!(gce_loss(&mut t, p, &[True], 0.0), Err(Error::Config(_))));
        assert!(matches!(gce_loss(&mut t, p, &[True], 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn gce_is_finite_at_zero_probability() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[[1.0, 0.0]]);
        let g = gce_loss(&mut t, p, &[Fake], 0.7).unwrap();
        let c = ce_loss(&mut t, p, &[Fake]).unwrap();
        assert!(scalar(&t, g).is_finite() && scalar(&t, c).is_finite());
    }

    #[test]
    fn weights_for_equal_and_zero_ce() {
        let mut t = Tape::new();
        let pc = probs(&mut t, &[[0.3, 0.7], [1.0, 0.0]]);
        let pb = probs(&mut t, &[[0.3, 0.7], [(-2.0f64).exp(), 1.0 - (-2.0f64).exp()]]);
        let w = bias_conflict_weights(&mut t, pc, pb, &[Fake, True]).unwrap();
        assert_eq!(t.value(w).data()[0], 0.5);
        assert!((t.value(w).data()[1] - 1.0).abs() < 1e-15);
        assert!(!t.requires_grad(w));
    }

    #[test]
    fn swap_rejects_singleton_batch() {
        let mut t = Tape::new();
        let z = t.variable(Tensor::zeros(1, 3));
        let err = swap_augment(&mut t, z, z, &[Fake], &mut rand::rng());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn identity_swap_is_noop() {
        let mut t = Tape::new();
        let zc = t.variable(Tensor::new(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let zb = t.variable(Tensor::new(3, 2, vec![-1., -2., -3., -4., -5., -6.]).unwrap());
        let labels = [Fake, True, True];
        let s = swap_with_permutation(&mut t, zc, zb, &labels, vec![0, 1, 2]).unwrap();
        assert_eq!(s.labels_hat, labels);
        let expect = t.concat_cols(&[zc, zb]).unwrap();
        assert_eq!(t.value(s.causal_view), t.value(expect));
        assert_eq!(t.value(s.biased_view), t.value(expect));
        assert!(swap_with_permutation(&mut t, zc, zb, &labels, vec![0, 0, 2]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_sim(&v, &v) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn supcon_small_cases() {
        let mut t = Tape::new();
        let same = t.variable(Tensor::new(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let l = supcon_in(&mut t, same, &[Fake, Fake], 0.1).unwrap();
        assert!(scalar(&t, l).abs() < 1e-12);
        let l = supcon_in(&mut t, same, &[Fake, True], 0.1).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let one = t.variable(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(supcon_in(&mut t, one, &[Fake], 0.1), Err(Error::Contract(_))));
        let l = supcon_out(&mut t, one, &[True], one, &[True], 0.1).unwrap();
        assert!(scalar(&t, l).abs() < 1e-12);
        let l = supcon_out(&mut t, one, &[True], one, &[Fake], 0.1).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn enhanced_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::scalar(1.0));
        let c = t.constant(Tensor::scalar(2.0));
        let e = enhanced_total(&mut t, l, c, 0.2).unwrap();
        assert!((scalar(&t, e) - 1.8).abs() < 1e-15);
        let e = enhanced_total(&mut t, l, c, 1.0).unwrap();
        assert_eq!(scalar(&t, e), 1.0);
        let e = enhanced_total(&mut t, l, c, 0.0).unwrap();
        assert_eq!(scalar(&t, e), 2.0);
    }

    #[test]
    fn hyper_validation() {
        assert!(LossHyperparams::default().validate().is_ok());
        assert!(LossHyperparams { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossHyperparams { gamma: 1.1, ..Default::default() }.validate().is_err());
    }
}

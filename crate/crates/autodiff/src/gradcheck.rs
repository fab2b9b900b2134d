//! Central finite-difference checks against tape gradients.
//!
//! The function is re-evaluated on tapes that replay every `detach` value
//! from the reference evaluation, so the numerical derivative is taken of
//! the same surrogate the reverse pass differentiates.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Reclassify failures at points where the one-sided differences
    /// disagree (ReLU kinks, clamps) instead of reporting them.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(f, inputs, &entries, cfg)
}

/// Checks only the listed `(input, flat index)` entries.
pub fn grad_check_entries<F>(
    f: F,
    inputs: &[Tensor],
    entries: &[(usize, usize)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let frozen = tape.detached_values();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_frozen_detach(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    let h = cfg.step;
    for &(i, j) in entries {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let abs_err = (analytic - numeric).abs();
        let rel_err = abs_err / analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.checked += 1;
        if rel_err > cfg.rel_tol && cfg.skip_kinks {
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let spread = (fwd - bwd).abs();
            let scale = fwd.abs().max(bwd.abs()).max(cfg.abs_floor);
            let lo = fwd.min(bwd) - cfg.rel_tol * scale;
            let hi = fwd.max(bwd) + cfg.rel_tol * scale;
            if spread > 0.1 * scale && (lo..=hi).contains(&analytic) {
                report.kinks += 1;
                continue;
            }
        }
        report.max_abs_err = report.max_abs_err.max(abs_err);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if rel_err > cfg.rel_tol {
            report.failures.push(GradCheckFailure {
                input: i,
                index: j,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}

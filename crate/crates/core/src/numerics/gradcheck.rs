//! Central finite-difference gradient checking.
//!
//! The caller fills the gradient slots of a [`ParamStore`] with its analytic
//! gradient, then hands [`grad_check`] a closure that re-evaluates the loss at
//! perturbed parameters. Every scalar is perturbed by `±step`; the two-sided
//! difference quotient is compared against the stored gradient.
//!
//! Piecewise-linear pieces (ReLU, clamps) make the loss non-differentiable on a
//! measure-zero set. When the closure reports an activation pattern, any
//! coordinate whose `+step` and `-step` probes land in different linear pieces
//! is counted as `skipped` rather than compared.

use super::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tolerance: 1e-4,
            abs_tolerance: 1e-6,
        }
    }
}

/// One loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    pub loss: f64,
    /// Which side of every kink the evaluation landed on; empty if smooth.
    pub pattern: Vec<bool>,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self {
            loss,
            pattern: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|)` over entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    pub non_finite: bool,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && !self.non_finite
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped).sum()
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !b.passed())
            .map(|b| b.name.as_str())
            .collect()
    }
}

/// Relative error used for reporting; 0 when both values are 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the gradients currently stored in `store` against central differences of `eval`.
///
/// Parameter values are restored exactly after each probe.
pub fn grad_check<F>(store: &mut ParamStore, cfg: &GradCheckConfig, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<Probe>,
{
    let mut reports = Vec::with_capacity(store.len());
    for b in 0..store.len() {
        let analytic: Vec<f64> = store.blocks()[b].grad.as_slice().to_vec();
        let mut report = BlockReport {
            name: store.blocks()[b].name.clone(),
            checked: 0,
            skipped: 0,
            failures: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            non_finite: false,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.blocks()[b].value.as_slice()[i];
            store.blocks_mut()[b].value.as_mut_slice()[i] = original + cfg.step;
            let plus = eval(store);
            store.blocks_mut()[b].value.as_mut_slice()[i] = original - cfg.step;
            let minus = eval(store);
            store.blocks_mut()[b].value.as_mut_slice()[i] = original;
            let (plus, minus) = (plus?, minus?);

            if !plus.loss.is_finite() || !minus.loss.is_finite() || !a.is_finite() {
                report.non_finite = true;
                continue;
            }
            if plus.pattern != minus.pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let abs_err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs_err);
            if abs_err > cfg.abs_tolerance {
                let rel = relative_error(a, numeric);
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > cfg.rel_tolerance {
                    report.failures += 1;
                }
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { blocks: reports })
}

//! Per-user loss terms with their derivatives, and the probability algebra
//! that links the purchase head, the detector and the LTV experts.

use crate::error::{Error, Result};
use crate::numerics::{clamped_ln, softplus};

/// Expert scale outputs are floored here after the softplus.
pub const SIGMA_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy written on the logit: `softplus(z) - y·z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub d_logit: f64,
}

pub fn cross_entropy_logit(logit: f64, label: bool) -> CrossEntropy {
    let y = if label { 1.0 } else { 0.0 };
    CrossEntropy {
        loss: softplus(logit) - y * logit,
        d_logit: logistic(logit) - y,
    }
}

/// Zero-inflated lognormal negative log-likelihood of one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZilnLoss {
    pub classification: f64,
    /// Lognormal term; present only for positive spend and may be negative.
    pub regression: f64,
    pub d_logit: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
}

impl ZilnLoss {
    pub fn total(&self) -> f64 {
        self.classification + self.regression
    }
}

/// ZILN loss for purchase logit `p_logit`, location `mu` and scale `sigma`.
///
/// The lognormal term is gated on `ltv > 0` as a whole.
pub fn ziln_loss(p_logit: f64, mu: f64, sigma: f64, ltv: f64) -> Result<ZilnLoss> {
    if !(ltv >= 0.0 && ltv.is_finite()) {
        return Err(Error::InvalidInput(format!("ltv label must be >= 0, got {ltv}")));
    }
    // also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let purchased = ltv > 0.0;
    let ce = cross_entropy_logit(p_logit, purchased);
    let (regression, d_mu, d_sigma) = if purchased {
        let log_ltv = ltv.ln();
        let resid = log_ltv - mu;
        let s2 = sigma * sigma;
        (
            log_ltv + sigma.ln() + HALF_LN_2PI + resid * resid / (2.0 * s2),
            -resid / s2,
            1.0 / sigma - resid * resid / (s2 * sigma),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let out = ZilnLoss {
        classification: ce.loss,
        regression,
        d_logit: ce.d_logit,
        d_mu,
        d_sigma,
    };
    if !out.total().is_finite() {
        return Err(Error::NonFinite("ZILN loss".into()));
    }
    Ok(out)
}

/// `KL([t, 1-t] || [q_gw, q_ngw])` with `0·log 0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlLoss {
    pub loss: f64,
    pub d_gw: f64,
    pub d_ngw: f64,
    /// Whether either log argument hit the floor.
    pub clamped: [bool; 2],
}

pub fn kl_two_point(target: f64, q_gw: f64, q_ngw: f64) -> Result<KlLoss> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidInput(format!("target must lie in [0, 1], got {target}")));
    }
    let t = [target, 1.0 - target];
    let q = [q_gw, q_ngw];
    let mut loss = 0.0;
    let mut d = [0.0; 2];
    let mut clamped = [false; 2];
    for i in 0..2 {
        let (ln_q, inv_q, c) = clamped_ln(q[i]);
        clamped[i] = c;
        if t[i] > 0.0 {
            loss += t[i] * (t[i].ln() - ln_q);
            d[i] = -t[i] * inv_q;
        }
    }
    Ok(KlLoss {
        loss,
        d_gw: d[0],
        d_ngw: d[1],
        clamped,
    })
}

/// Splits the purchase probability with the detector output:
/// returns `(p·y[0], (1 - p) + p·y[1])`.
#[inline]
pub fn bayes_split(p_ptr: f64, y: [f64; 2]) -> (f64, f64) {
    (p_ptr * y[0], (1.0 - p_ptr) + p_ptr * y[1])
}

/// Gate-weighted mixture of expert parameters.
#[inline]
pub fn mix(y: [f64; 2], expert: [f64; 2]) -> f64 {
    y[0] * expert[0] + y[1] * expert[1]
}

/// Mean of the zero-inflated lognormal: `p·exp(mu + sigma²/2)`.
#[inline]
pub fn expected_ltv(p_ptr: f64, mu: f64, sigma: f64) -> f64 {
    p_ptr * (mu + 0.5 * sigma * sigma).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spend_is_cross_entropy_only() {
        let l = ziln_loss(0.0, 3.0, 2.0, 0.0).unwrap();
        assert!((l.total() - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((l.total() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.regression, 0.0);
        assert_eq!(l.d_mu, 0.0);
    }

    #[test]
    fn regression_term_at_mode() {
        let l = ziln_loss(50.0, 0.0, 1.0, 1.0).unwrap();
        assert!((l.regression - 0.918939).abs() < 1e-6);
        assert!(l.classification < 1e-20);
    }

    #[test]
    fn ziln_rejects_bad_inputs() {
        assert!(ziln_loss(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(ziln_loss(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn ziln_derivatives_match_differences() {
        let h = 1e-6;
        for &(z, mu, s, y) in &[(0.3, 1.0, 0.7, 4.0), (-2.0, -0.5, 1.3, 0.2), (1.0, 2.0, 0.4, 0.0)] {
            let l = ziln_loss(z, mu, s, y).unwrap();
            let f = |z, mu, s| ziln_loss(z, mu, s, y).unwrap().total();
            let dz = (f(z + h, mu, s) - f(z - h, mu, s)) / (2.0 * h);
            let dm = (f(z, mu + h, s) - f(z, mu - h, s)) / (2.0 * h);
            let ds = (f(z, mu, s + h) - f(z, mu, s - h)) / (2.0 * h);
            assert!((dz - l.d_logit).abs() < 1e-7);
            assert!((dm - l.d_mu).abs() < 1e-6);
            assert!((ds - l.d_sigma).abs() < 1e-6);
        }
    }

    #[test]
    fn ziln_minimizer_is_mean_log_label() {
        // closed-form lognormal MLE: mu* = mean(ln y)
        let labels = [0.5, 2.0, 3.7, 11.0, 0.9];
        let mean_log = labels.iter().map(|y: &f64| y.ln()).sum::<f64>() / labels.len() as f64;
        let grad_at = |mu: f64| -> f64 { labels.iter().map(|&y| ziln_loss(0.0, mu, 0.8, y).unwrap().d_mu).sum() };
        assert!(grad_at(mean_log).abs() < 1e-12);
        assert!(grad_at(mean_log - 0.1) < 0.0);
        assert!(grad_at(mean_log + 0.1) > 0.0);
    }

    #[test]
    fn kl_examples() {
        let (gw, ngw) = bayes_split(0.2, [0.3, 0.7]);
        assert!((gw - 0.06).abs() < 1e-15);
        assert!((ngw - 0.94).abs() < 1e-15);
        assert!((gw + ngw - 1.0).abs() < 1e-15);

        let same = kl_two_point(0.06, 0.06, 0.94).unwrap();
        assert!(same.loss.abs() < 1e-15);
        let degenerate = kl_two_point(0.0, 0.1, 0.9).unwrap();
        assert!((degenerate.loss - 0.105361).abs() < 1e-6);
        assert_eq!(degenerate.d_gw, 0.0);
        assert!(kl_two_point(1.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_grid() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            for j in 1..20 {
                let q = j as f64 / 20.0;
                assert!(kl_two_point(t, q, 1.0 - q).unwrap().loss >= -1e-15);
            }
        }
    }

    #[test]
    fn lognormal_mean_identity() {
        assert!((expected_ltv(1.0, 0.0, 1e-9) - 1.0).abs() < 1e-12);
        assert_eq!(mix([1.0, 0.0], [2.5, -1.0]), 2.5);
    }
}

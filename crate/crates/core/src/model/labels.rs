//! Label definitions derived from spend.

use crate::error::{Error, Result};

fn check(ltv: f64, r: f64) -> Result<()> {
    if !(ltv >= 0.0 && ltv.is_finite()) {
        return Err(Error::InvalidInput(format!("ltv must be finite and >= 0, got {ltv}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidInput(format!("whale threshold R must be > 0, got {r}")));
    }
    Ok(())
}

/// Soft target for "purchases and is a whale": `1 - exp(-ltv / r)`.
///
/// Zero exactly when `ltv` is zero.
pub fn gwptr_target(ltv: f64, r: f64) -> Result<f64> {
    check(ltv, r)?;
    Ok(-(-ltv / r).exp_m1())
}

/// Whale flag: spend at or above the threshold.
pub fn whale_label(ltv: f64, r: f64) -> Result<bool> {
    check(ltv, r)?;
    Ok(ltv >= r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gwptr_examples() {
        assert_eq!(gwptr_target(0.0, 7.0).unwrap(), 0.0);
        let at_r = gwptr_target(300.0, 300.0).unwrap();
        assert!((at_r - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((at_r - 0.632121).abs() < 1e-6);
        assert!(gwptr_target(600.0, 300.0).unwrap() > at_r);
        assert!(gwptr_target(1e-300, 300.0).unwrap() > 0.0);
    }

    #[test]
    fn whale_boundary_is_inclusive() {
        assert!(whale_label(300.0, 300.0).unwrap());
        assert!(!whale_label(0.0, 300.0).unwrap());
        assert!(!whale_label(300.0 - 1e-9, 300.0).unwrap());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(gwptr_target(-1.0, 1.0).is_err());
        assert!(gwptr_target(1.0, 0.0).is_err());
        assert!(whale_label(f64::NAN, 1.0).is_err());
        assert!(whale_label(1.0, -3.0).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::record::Dataset;
use crate::error::{Error, Result};

/// Train / validation / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    /// Split on the day index rather than on record position.
    pub time_ordered: bool,
}

impl Default for SplitSpec {
    /// 40 training days, 3 validation days, 3 test days.
    fn default() -> Self {
        Self {
            train: 40.0 / 46.0,
            valid: 3.0 / 46.0,
            test: 3.0 / 46.0,
            time_ordered: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Day boundaries `(end_of_train, end_of_valid)` for `n_days` days.
pub fn day_boundaries(spec: &SplitSpec, n_days: u32) -> (u32, u32) {
    let n = f64::from(n_days);
    let b1 = (spec.train * n).round() as u32;
    let b2 = ((spec.train + spec.valid) * n).round() as u32;
    (b1, b2.max(b1))
}

/// Splits `dataset` into disjoint parts; each part keeps the input order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let fr = [spec.train, spec.valid, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fr:?}"
        )));
    }
    let assign: Vec<usize> = if spec.time_ordered {
        let n_days = dataset.records.iter().map(|r| r.day + 1).max().unwrap_or(0);
        let (b1, b2) = day_boundaries(spec, n_days);
        dataset
            .records
            .iter()
            .map(|r| {
                if r.day < b1 {
                    0
                } else if r.day < b2 {
                    1
                } else {
                    2
                }
            })
            .collect()
    } else {
        let n = dataset.len() as f64;
        let n1 = (spec.train * n).round() as usize;
        let n2 = ((spec.train + spec.valid) * n).round() as usize;
        (0..dataset.len())
            .map(|i| {
                if i < n1 {
                    0
                } else if i < n2 {
                    1
                } else {
                    2
                }
            })
            .collect()
    };

    let mut parts: [Vec<_>; 3] = Default::default();
    for (rec, &k) in dataset.records.iter().zip(&assign) {
        parts[k].push(rec.clone());
    }
    for (k, name) in ["train", "valid", "test"].iter().enumerate() {
        if fr[k] > 0.0 && parts[k].is_empty() {
            return Err(Error::InvalidInput(format!(
                "{name} split is empty (fraction {})",
                fr[k]
            )));
        }
    }
    let [train, valid, test] = parts;
    Ok(Splits {
        train: Dataset::new(dataset.layout, train),
        valid: Dataset::new(dataset.layout, valid),
        test: Dataset::new(dataset.layout, test),
    })
}

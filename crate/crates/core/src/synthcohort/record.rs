use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::labels::{gwptr_target, whale_label};

/// Ground-truth latent segment of a synthetic user.
///
/// Training never reads this; it is kept so routing quality can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    NonSpender,
    LowSpender,
    Whale,
}

impl Segment {
    pub fn code(self) -> u8 {
        match self {
            Segment::NonSpender => 0,
            Segment::LowSpender => 1,
            Segment::Whale => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Segment::NonSpender),
            1 => Some(Segment::LowSpender),
            2 => Some(Segment::Whale),
            _ => None,
        }
    }
}

/// Column counts of a dataset: dense, categorical and sequence features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_dense: usize,
    pub n_categorical: usize,
    pub n_sequence: usize,
}

impl Layout {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["user_id".to_string(), "day".to_string()];
        cols.extend((0..self.n_dense).map(|i| format!("dense_{i}")));
        cols.extend((0..self.n_categorical).map(|i| format!("cat_{i}")));
        cols.extend((0..self.n_sequence).map(|i| format!("seq_{i}")));
        cols.extend(["ltv", "s", "g", "gwptr", "segment"].map(String::from));
        cols
    }

    pub fn num_columns(&self) -> usize {
        2 + self.n_dense + self.n_categorical + self.n_sequence + 5
    }
}

/// One user: raw features plus the spend label and everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: u64,
    /// Synthetic registration day, used for chronological splits.
    pub day: u32,
    pub dense: Vec<f64>,
    /// Raw categorical values; 0 is reserved for "unknown".
    pub categorical: Vec<u32>,
    /// Raw token lists; 0 is reserved for "unknown".
    pub sequences: Vec<Vec<u32>>,
    /// T-day spend.
    pub ltv: f64,
    /// Purchase flag, `ltv > 0`.
    pub purchased: bool,
    /// Whale flag, `ltv >= R`.
    pub whale: bool,
    /// `1 - exp(-ltv / R)`.
    pub gwptr: f64,
    pub segment: Option<Segment>,
}

impl UserRecord {
    /// Fills the spend-derived labels from `ltv` and the whale threshold `r`.
    pub fn set_spend(&mut self, ltv: f64, r: f64) -> Result<()> {
        self.gwptr = gwptr_target(ltv, r)?;
        self.whale = whale_label(ltv, r)?;
        self.ltv = ltv;
        self.purchased = ltv > 0.0;
        Ok(())
    }

    /// Row-level label invariants that do not depend on the threshold.
    pub fn check_intrinsic(&self) -> Result<()> {
        if !self.ltv.is_finite() || self.ltv < 0.0 {
            return Err(Error::InvalidInput(format!(
                "user {}: ltv must be finite and nonnegative, got {}",
                self.user_id, self.ltv
            )));
        }
        if self.purchased != (self.ltv > 0.0) {
            return Err(Error::InvalidInput(format!(
                "user {}: purchase flag disagrees with ltv {}",
                self.user_id, self.ltv
            )));
        }
        if self.whale && !self.purchased {
            return Err(Error::InvalidInput(format!(
                "user {}: whale without a purchase",
                self.user_id
            )));
        }
        if !(0.0..=1.0).contains(&self.gwptr) {
            return Err(Error::InvalidInput(format!(
                "user {}: gwptr {} outside [0, 1]",
                self.user_id, self.gwptr
            )));
        }
        if self.dense.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "user {}: non-finite dense feature",
                self.user_id
            )));
        }
        Ok(())
    }

    /// Checks `g`, `s` and `gwptr` against the threshold `r` exactly.
    pub fn check_labels(&self, r: f64) -> Result<()> {
        self.check_intrinsic()?;
        if self.whale != whale_label(self.ltv, r)? {
            return Err(Error::InvalidInput(format!(
                "user {}: whale flag inconsistent with R = {r}",
                self.user_id
            )));
        }
        if self.gwptr != gwptr_target(self.ltv, r)? {
            return Err(Error::InvalidInput(format!(
                "user {}: gwptr {} inconsistent with R = {r}",
                self.user_id, self.gwptr
            )));
        }
        Ok(())
    }
}

/// A set of user records sharing one column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: Layout,
    pub records: Vec<UserRecord>,
}

impl Dataset {
    pub fn new(layout: Layout, records: Vec<UserRecord>) -> Self {
        Self { layout, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn purchase_rate(&self) -> f64 {
        self.fraction(|r| r.purchased)
    }

    pub fn whale_rate(&self) -> f64 {
        self.fraction(|r| r.whale)
    }

    fn fraction(&self, pred: impl Fn(&UserRecord) -> bool) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| pred(r)).count() as f64 / self.records.len() as f64
    }

    /// Share of total spend held by the top `frac` of spenders.
    pub fn top_spender_share(&self, frac: f64) -> f64 {
        let mut spend: Vec<f64> = self.records.iter().filter(|r| r.purchased).map(|r| r.ltv).collect();
        if spend.is_empty() {
            return 0.0;
        }
        spend.sort_by(|a, b| b.total_cmp(a));
        let top = ((spend.len() as f64 * frac).ceil() as usize).max(1);
        let total: f64 = spend.iter().sum();
        spend[..top].iter().sum::<f64>() / total
    }

    pub fn check_labels(&self, r: f64) -> Result<()> {
        self.records.iter().try_for_each(|rec| rec.check_labels(r))
    }
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::record::{Dataset, Layout, Segment, UserRecord};
use crate::error::{Error, Result};

/// Users generated per independently seeded substream.
const CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpendDistribution {
    /// Mean of log-spend.
    pub mu: f64,
    /// Standard deviation of log-spend.
    pub sigma: f64,
}

/// Parameters of a synthetic cohort. Defaults follow the GAME A row of the
/// published dataset statistics (11.8% purchase rate, 0.459% whales).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_users: usize,
    pub seed: u64,
    pub purchase_rate: f64,
    /// Target fraction of users with spend at or above `r`.
    pub whale_rate: f64,
    /// Whale threshold R.
    pub r: f64,
    /// Number of registration days; records are spread uniformly over them.
    pub n_days: u32,
    /// Spend horizon T in days. Metadata only.
    pub horizon_days: u32,
    pub low_spender: SpendDistribution,
    pub whale: SpendDistribution,
    /// Per-feature mean shift of dense features for low spenders and whales.
    pub dense_shift_low: Vec<f64>,
    pub dense_shift_whale: Vec<f64>,
    /// Loading of the within-segment spend latent on dense features 0, 2 and 3.
    pub value_loading: f64,
    /// Number of distinct values per categorical feature (values are 1-based).
    pub categorical_cardinalities: Vec<u32>,
    /// Probability a categorical value is drawn from the segment's preferred value.
    pub categorical_signal: f64,
    /// Emit the pre-registration behaviour sequence column.
    pub include_behavior_sequence: bool,
    pub sequence_vocab: u32,
    pub sequence_max_len: usize,
    /// Probability a behaviour token is drawn from the segment's token block.
    pub sequence_signal: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_users: 100_000,
            seed: 1,
            purchase_rate: 0.118,
            whale_rate: 0.00459,
            r: 300.0,
            n_days: 46,
            horizon_days: 7,
            low_spender: SpendDistribution { mu: 2.0, sigma: 1.0 },
            whale: SpendDistribution { mu: 6.5, sigma: 0.7 },
            dense_shift_low: vec![0.6, 0.5, 0.3, 0.0, 0.4, 0.5],
            dense_shift_whale: vec![1.4, 1.2, 0.3, 1.0, 0.8, 1.2],
            value_loading: 0.8,
            categorical_cardinalities: vec![8, 5, 20],
            categorical_signal: 0.3,
            include_behavior_sequence: true,
            sequence_vocab: 30,
            sequence_max_len: 12,
            sequence_signal: 0.35,
        }
    }
}

fn normal_sf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").sf(x)
}

impl CohortSpec {
    /// Parses a TOML spec; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Serde(m) => Error::Serde(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n_dense: self.dense_shift_low.len(),
            n_categorical: self.categorical_cardinalities.len(),
            n_sequence: usize::from(self.include_behavior_sequence),
        }
    }

    fn prob(name: &str, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {p}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::prob("purchase_rate", self.purchase_rate)?;
        Self::prob("whale_rate", self.whale_rate)?;
        Self::prob("categorical_signal", self.categorical_signal)?;
        Self::prob("sequence_signal", self.sequence_signal)?;
        if self.purchase_rate >= 1.0 {
            return Err(Error::InvalidInput("purchase_rate must be below 1".into()));
        }
        let degenerate = self.purchase_rate == 0.0 && self.whale_rate == 0.0;
        if !degenerate && self.whale_rate >= self.purchase_rate {
            return Err(Error::InvalidInput(format!(
                "whale_rate ({}) must be below purchase_rate ({}): whales are a subset of spenders",
                self.whale_rate, self.purchase_rate
            )));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidInput(format!("R must be positive, got {}", self.r)));
        }
        for (name, d) in [("low_spender", self.low_spender), ("whale", self.whale)] {
            if !(d.sigma > 0.0 && d.sigma.is_finite() && d.mu.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} spend distribution needs finite mu and sigma > 0"
                )));
            }
        }
        if self.dense_shift_low.len() != self.dense_shift_whale.len() {
            return Err(Error::InvalidInput(
                "dense_shift_low and dense_shift_whale must have equal length".into(),
            ));
        }
        if self.dense_shift_low.len() < 4 {
            return Err(Error::InvalidInput("at least 4 dense features are required".into()));
        }
        if self.categorical_cardinalities.contains(&0) {
            return Err(Error::InvalidInput("categorical cardinalities must be >= 1".into()));
        }
        if self.include_behavior_sequence && (self.sequence_vocab < 3 || self.sequence_max_len == 0) {
            return Err(Error::InvalidInput(
                "behaviour sequence needs vocab >= 3 and max length >= 1".into(),
            ));
        }
        if self.n_days == 0 {
            return Err(Error::InvalidInput("n_days must be >= 1".into()));
        }
        self.whale_segment_rate().map(|_| ())
    }

    /// Probability of the heavy-spend segment such that the expected share of
    /// users with spend `>= r` equals `whale_rate`.
    pub fn whale_segment_rate(&self) -> Result<f64> {
        if self.purchase_rate == 0.0 {
            return Ok(0.0);
        }
        let ln_r = self.r.ln();
        let tail_low = normal_sf((ln_r - self.low_spender.mu) / self.low_spender.sigma);
        let tail_whale = normal_sf((ln_r - self.whale.mu) / self.whale.sigma);
        if tail_whale <= tail_low {
            return Err(Error::InvalidInput(
                "whale spend distribution must put more mass above R than the low-spender one".into(),
            ));
        }
        let q = (self.whale_rate - self.purchase_rate * tail_low) / (tail_whale - tail_low);
        if q < 0.0 {
            return Err(Error::InvalidInput(format!(
                "low spenders alone already exceed whale_rate {} (they reach R with probability {tail_low:.3e})",
                self.whale_rate
            )));
        }
        if q > self.purchase_rate {
            return Err(Error::InvalidInput(format!(
                "whale_rate {} unreachable: every spender in the whale segment yields only {:.3e}",
                self.whale_rate,
                self.purchase_rate * tail_whale
            )));
        }
        Ok(q)
    }
}

/// Draws a labelled synthetic cohort.
///
/// Users are generated in fixed-size index ranges, each from its own seeded
/// stream, so the output does not depend on how ranges are scheduled.
pub fn generate(spec: &CohortSpec) -> Result<Dataset> {
    spec.validate()?;
    let whale_q = spec.whale_segment_rate()?;
    let n_chunks = spec.n_users.div_ceil(CHUNK);
    let chunks: Vec<Vec<UserRecord>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(c as u64);
            let start = c * CHUNK;
            let end = (start + CHUNK).min(spec.n_users);
            (start..end)
                .map(|i| draw_user(spec, whale_q, i as u64, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(spec.layout(), chunks.into_iter().flatten().collect()))
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_user<R: Rng>(spec: &CohortSpec, whale_q: f64, user_id: u64, rng: &mut R) -> Result<UserRecord> {
    let u: f64 = rng.gen();
    let segment = if u < whale_q {
        Segment::Whale
    } else if u < spec.purchase_rate {
        Segment::LowSpender
    } else {
        Segment::NonSpender
    };
    let day = rng.gen_range(0..spec.n_days);

    // Within-segment spend latent; log-spend = mu + sigma * value.
    let value = gauss(rng);
    let ltv = match segment {
        Segment::NonSpender => 0.0,
        Segment::LowSpender => (spec.low_spender.mu + spec.low_spender.sigma * value).exp(),
        Segment::Whale => (spec.whale.mu + spec.whale.sigma * value).exp(),
    };

    let n_dense = spec.dense_shift_low.len();
    let mut dense = Vec::with_capacity(n_dense);
    for j in 0..n_dense {
        let shift = match segment {
            Segment::NonSpender => 0.0,
            Segment::LowSpender => spec.dense_shift_low[j],
            Segment::Whale => spec.dense_shift_whale[j],
        };
        let loading = match (segment, j) {
            (Segment::NonSpender, _) => 0.0,
            (_, 0) => spec.value_loading,
            (Segment::LowSpender, 2) => spec.value_loading,
            (Segment::Whale, 3) => spec.value_loading,
            _ => 0.0,
        };
        let x = shift + loading * value + gauss(rng);
        // last dense feature is count-like and heavy tailed
        dense.push(if j == n_dense - 1 { x.exp() } else { x });
    }

    let seg_idx = segment.code() as u32;
    let categorical = spec
        .categorical_cardinalities
        .iter()
        .enumerate()
        .map(|(c, &card)| {
            if segment != Segment::NonSpender && rng.gen_bool(spec.categorical_signal) {
                (seg_idx * 3 + c as u32 * 5) % card + 1
            } else {
                rng.gen_range(1..=card)
            }
        })
        .collect();

    let sequences = if spec.include_behavior_sequence {
        let vocab = spec.sequence_vocab;
        // tokens 1..=vocab split into three blocks, one per segment
        let block = vocab / 3;
        let max_len = match segment {
            Segment::NonSpender => spec.sequence_max_len / 2,
            _ => spec.sequence_max_len,
        };
        let len = rng.gen_range(0..=max_len);
        let seq = (0..len)
            .map(|_| {
                if rng.gen_bool(spec.sequence_signal) {
                    seg_idx * block + rng.gen_range(1..=block)
                } else {
                    rng.gen_range(1..=vocab)
                }
            })
            .collect();
        vec![seq]
    } else {
        Vec::new()
    };

    let mut rec = UserRecord {
        user_id,
        day,
        dense,
        categorical,
        sequences,
        ltv: 0.0,
        purchased: false,
        whale: false,
        gwptr: 0.0,
        segment: Some(segment),
    };
    rec.set_spend(ltv, spec.r)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortSpec {
        CohortSpec {
            n_users: n,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small(20_000)).unwrap();
        let b = generate(&small(20_000)).unwrap();
        assert_eq!(a, b);
        let c = generate(&CohortSpec {
            seed: 2,
            ..small(20_000)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_purchase_rate_means_no_spend() {
        let spec = CohortSpec {
            purchase_rate: 0.0,
            whale_rate: 0.0,
            ..small(5_000)
        };
        let ds = generate(&spec).unwrap();
        assert!(ds
            .records
            .iter()
            .all(|r| r.ltv == 0.0 && !r.purchased && !r.whale && r.gwptr == 0.0));
    }

    #[test]
    fn infeasible_rates_rejected() {
        let too_many_whales = CohortSpec {
            whale_rate: 0.2,
            ..CohortSpec::default()
        };
        assert!(generate(&too_many_whales).is_err());
        let unreachable = CohortSpec {
            whale_rate: 0.117,
            ..CohortSpec::default()
        };
        let err = unreachable.validate().unwrap_err().to_string();
        assert!(err.contains("unreachable"), "{err}");
        let bad_sigma = CohortSpec {
            whale: SpendDistribution { mu: 6.0, sigma: 0.0 },
            ..CohortSpec::default()
        };
        assert!(bad_sigma.validate().is_err());
    }

    #[test]
    fn labels_consistent_row_by_row() {
        let spec = small(30_000);
        let ds = generate(&spec).unwrap();
        ds.check_labels(spec.r).unwrap();
        for r in &ds.records {
            assert_eq!(r.purchased, r.segment != Some(Segment::NonSpender));
        }
    }

    #[test]
    fn sequence_column_is_optional() {
        let spec = CohortSpec {
            include_behavior_sequence: false,
            ..small(100)
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.layout.n_sequence, 0);
        assert!(ds.records.iter().all(|r| r.sequences.is_empty()));
    }

    #[test]
    fn toml_round_trip_and_partial_specs() {
        let spec = small(10);
        assert_eq!(CohortSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let partial = CohortSpec::from_toml("n_users = 500\nseed = 3\n").unwrap();
        assert_eq!((partial.n_users, partial.seed, partial.r), (500, 3, 300.0));
        assert!(CohortSpec::from_toml("n_user = 5\n").is_err());
        assert!(CohortSpec::from_toml("whale_rate = 0.5\n").is_err());
    }
}

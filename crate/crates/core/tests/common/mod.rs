#![allow(dead_code)]

use expltv::features::{EncodedUser, FeatureSchema};
use expltv::model::{Architecture, ExpLtv, Targets, Variant};
use expltv::synthcohort::{generate, split, CohortSpec, Dataset, SplitSpec, Splits};
use expltv::trainer::TrainConfig;

/// Cohort with inflated purchase and whale rates, so small batches see every label kind.
pub fn rich_cohort(n: usize, seed: u64) -> Dataset {
    generate(&CohortSpec {
        n_users: n,
        seed,
        purchase_rate: 0.5,
        whale_rate: 0.15,
        ..CohortSpec::default()
    })
    .unwrap()
}

pub fn small_arch(variant: Variant) -> Architecture {
    Architecture {
        d: 3,
        d1: 4,
        hidden: 5,
        variant,
        ..Architecture::default()
    }
}

pub fn model_on(data: &Dataset, arch: Architecture, seed: u64) -> (ExpLtv, Vec<EncodedUser>, Targets) {
    let model = ExpLtv::new(arch, FeatureSchema::fit(data).unwrap(), seed).unwrap();
    let users = model.encode(&data.records).unwrap();
    (model, users, Targets::from_records(&data.records))
}

pub fn small_splits(n: usize, seed: u64) -> Splits {
    split(&rich_cohort(n, seed), &SplitSpec::default()).unwrap()
}

pub fn quick_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        d: 4,
        d1: 4,
        hidden: 6,
        epochs: 3,
        learning_rate: 1e-3,
        variant,
        seed,
        ..TrainConfig::default()
    }
}

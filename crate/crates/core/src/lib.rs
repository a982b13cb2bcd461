//! Whale-aware lifetime-value prediction for newly registered players.
//!
//! A gate network estimates each user's probability of becoming a high
//! spender ("whale") and mixes two zero-inflated lognormal LTV experts. The
//! crate bundles everything needed to train and evaluate the model without
//! external ML dependencies: a small dense-network substrate with hand-written
//! gradients, feature encoding, a synthetic cohort generator, ranking metrics
//! and an early-stopping trainer.

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthcohort;
pub mod trainer;

pub use error::{Error, Result};

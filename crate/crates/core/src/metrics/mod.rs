//! Ranking metrics for both tasks: AUC of the purchase head, normalized GINI
//! of predicted LTV, Recall@K of the whale detector and per-level whale
//! curves.
//!
//! Ties are resolved deterministically. AUC counts a tied positive/negative
//! pair as one half; GINI replaces the true values inside a group of equal
//! predictions by the group mean; top-K selection orders equal scores by
//! ascending user id.

pub mod oracle;
mod report;

use crate::error::{Error, Result};

pub use report::{evaluate, read_scores, read_scores_file, write_scores, EvalConfig, EvalReport, ScoredUser};

/// Number of whale levels in a full-resolution curve.
pub const LEVELS: usize = 10;

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {i} is not finite")));
    }
    Ok(())
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(what, expected, actual));
    }
    Ok(())
}

/// Descending order on finite values; `-0.0` and `0.0` compare equal.
fn desc(a: f64, b: f64) -> std::cmp::Ordering {
    b.partial_cmp(&a).expect("finite scores")
}

/// Indices sorted by score descending, then user id ascending.
pub fn rank_order(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| desc(scores[a], scores[b]).then(ids[a].cmp(&ids[b])));
    idx
}

/// Probability that a random positive scores above a random negative, ties as ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("auc labels", scores.len(), labels.len())?;
    check_scores(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC with a single class"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| desc(scores[b], scores[a]));
    // twice the Mann-Whitney U, kept integral
    let mut u2: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let pos = idx[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        let neg = (end - start) as u64 - pos;
        u2 += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        start = end;
    }
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Unnormalized GINI of `truth` ordered by `keys` descending, ties averaged.
fn gini_raw(keys: &[f64], truth: &[f64], total: f64) -> f64 {
    let n = keys.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| desc(keys[a], keys[b]));
    let mut cum = 0.0;
    let mut area = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && keys[idx[end]] == keys[idx[start]] {
            end += 1;
        }
        let mean = idx[start..end].iter().map(|&i| truth[i]).sum::<f64>() / (end - start) as f64;
        for _ in start..end {
            cum += mean;
            area += cum;
        }
        start = end;
    }
    let n = n as f64;
    area / total / n - (n + 1.0) / (2.0 * n)
}

/// Normalized GINI: Lorenz-area ratio of prediction order to true order.
///
/// When every true value is equal all orderings are optimal and the result is 1.
pub fn gini_normalized(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("gini truth", predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(Error::Undefined("GINI of an empty population"));
    }
    check_scores(predicted)?;
    if let Some(i) = truth.iter().position(|&t| !(t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!("true value {i} must be finite and >= 0")));
    }
    let total: f64 = truth.iter().sum();
    if total == 0.0 {
        return Err(Error::Undefined("GINI with all-zero true values"));
    }
    if truth.iter().all(|&t| t == truth[0]) {
        return Ok(1.0);
    }
    Ok(gini_raw(predicted, truth, total) / gini_raw(truth, truth, total))
}

/// Number of whales in the top `k` by score.
fn hits_at(order: &[usize], whales: &[bool], k: usize) -> usize {
    order[..k].iter().filter(|&&i| whales[i]).count()
}

/// Fraction of all whales found in the top `k` users by score.
pub fn recall_at_k(scores: &[f64], whales: &[bool], ids: &[u64], k: usize) -> Result<f64> {
    check_len("recall labels", scores.len(), whales.len())?;
    check_len("recall ids", scores.len(), ids.len())?;
    check_scores(scores)?;
    let total = whales.iter().filter(|&&w| w).count();
    if total == 0 {
        return Err(Error::Undefined("Recall@K without whales"));
    }
    if k > scores.len() {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds population {}",
            scores.len()
        )));
    }
    let order = rank_order(scores, ids);
    Ok(hits_at(&order, whales, k) as f64 / total as f64)
}

/// Whales detected in a top-K list, broken down by LTV level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelCurve {
    pub k: usize,
    /// `detected[i]`: detected whales at levels `1..=i+1` (level 1 = highest LTV).
    pub detected: Vec<usize>,
    /// `totals[i]`: all whales at levels `1..=i+1`.
    pub totals: Vec<usize>,
}

impl LevelCurve {
    pub fn levels(&self) -> usize {
        self.detected.len()
    }
}

/// Level of each whale (1-based) given whales ranked by LTV descending.
///
/// With `n` whales and `levels` levels, the whale at rank `r` gets level
/// `floor(r·levels/n) + 1`.
pub fn whale_levels(n_whales: usize) -> (usize, impl Fn(usize) -> usize) {
    let levels = LEVELS.min(n_whales);
    (levels, move |rank: usize| rank * levels / n_whales + 1)
}

/// Cumulative count of detected whales per LTV level among the top `k` by score.
///
/// Fewer than ten whales fall back to one level per whale.
pub fn level_curve(scores: &[f64], ltv: &[f64], whales: &[bool], ids: &[u64], k: usize) -> Result<LevelCurve> {
    check_len("level-curve ltv", scores.len(), ltv.len())?;
    check_len("level-curve labels", scores.len(), whales.len())?;
    check_len("level-curve ids", scores.len(), ids.len())?;
    check_scores(scores)?;
    check_scores(ltv)?;
    if k > scores.len() {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds population {}",
            scores.len()
        )));
    }
    let mut whale_idx: Vec<usize> = (0..scores.len()).filter(|&i| whales[i]).collect();
    if whale_idx.is_empty() {
        return Err(Error::Undefined("level curve without whales"));
    }
    if whale_idx.len() < LEVELS {
        log::warn!(
            "only {} whales; level curve uses {} levels instead of {LEVELS}",
            whale_idx.len(),
            whale_idx.len()
        );
    }
    whale_idx.sort_by(|&a, &b| desc(ltv[a], ltv[b]).then(ids[a].cmp(&ids[b])));
    let (levels, level_of) = whale_levels(whale_idx.len());
    let mut level = vec![0usize; scores.len()];
    for (rank, &i) in whale_idx.iter().enumerate() {
        level[i] = level_of(rank);
    }
    let order = rank_order(scores, ids);
    let mut detected = vec![0usize; levels];
    let mut totals = vec![0usize; levels];
    for &i in &whale_idx {
        totals[level[i] - 1] += 1;
    }
    for &i in &order[..k] {
        if whales[i] {
            detected[level[i] - 1] += 1;
        }
    }
    for l in 1..levels {
        detected[l] += detected[l - 1];
        totals[l] += totals[l - 1];
    }
    Ok(LevelCurve { k, detected, totals })
}

#[cfg(test)]
mod tests;

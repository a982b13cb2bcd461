//! Quadratic-time reference implementations of every metric, written from the
//! definitions with no sorting. Used by the test suite and `selfcheck`.

use super::LEVELS;

/// Pair counting over every positive/negative pair.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut half_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                half_wins += 2;
            } else if scores[i] == scores[j] {
                half_wins += 1;
            }
        }
    }
    (pairs > 0).then(|| half_wins as f64 / (2 * pairs) as f64)
}

/// Lorenz polygon through the boundaries of each tie group, integrated with
/// trapezoids, minus the diagonal.
fn lorenz_gini(keys: &[f64], truth: &[f64]) -> f64 {
    let n = keys.len();
    let total: f64 = truth.iter().sum();
    // a tie group is identified by how many users score strictly higher
    let above: Vec<usize> = keys.iter().map(|&k| keys.iter().filter(|&&o| o > k).count()).collect();
    let mut area = 0.0;
    let mut covered = 0usize;
    let mut share = 0.0;
    while covered < n {
        let members: Vec<usize> = (0..n).filter(|&i| above[i] == covered).collect();
        let gain: f64 = members.iter().map(|&i| truth[i]).sum::<f64>() / total;
        let width = members.len() as f64 / n as f64;
        area += width * (share + share + gain) / 2.0;
        share += gain;
        covered += members.len();
    }
    area - 0.5
}

pub fn gini_normalized(predicted: &[f64], truth: &[f64]) -> Option<f64> {
    let total: f64 = truth.iter().sum();
    if predicted.is_empty() || total == 0.0 {
        return None;
    }
    if truth.iter().all(|&t| t == truth[0]) {
        return Some(1.0);
    }
    Some(lorenz_gini(predicted, truth) / lorenz_gini(truth, truth))
}

/// Position of user `i` in the top-K order: how many users beat it.
fn position(scores: &[f64], ids: &[u64], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
        .count()
}

pub fn recall_at_k(scores: &[f64], whales: &[bool], ids: &[u64], k: usize) -> Option<f64> {
    let total = whales.iter().filter(|&&w| w).count();
    if total == 0 || k > scores.len() {
        return None;
    }
    let hits = (0..scores.len())
        .filter(|&i| whales[i] && position(scores, ids, i) < k)
        .count();
    Some(hits as f64 / total as f64)
}

/// `(detected, totals)` per cumulative level, enumerating every whale.
pub fn level_curve(
    scores: &[f64],
    ltv: &[f64],
    whales: &[bool],
    ids: &[u64],
    k: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let whale_ids: Vec<usize> = (0..scores.len()).filter(|&i| whales[i]).collect();
    let n_w = whale_ids.len();
    if n_w == 0 || k > scores.len() {
        return None;
    }
    let levels = LEVELS.min(n_w);
    let mut detected = vec![0usize; levels];
    let mut totals = vec![0usize; levels];
    for &i in &whale_ids {
        let rank = whale_ids
            .iter()
            .filter(|&&j| ltv[j] > ltv[i] || (ltv[j] == ltv[i] && ids[j] < ids[i]))
            .count();
        // smallest level L (1-based) whose share of the ranking covers this whale
        let level = (1..=levels).find(|&l| rank * levels < l * n_w).expect("rank < n_w");
        let hit = position(scores, ids, i) < k;
        for l in level..=levels {
            totals[l - 1] += 1;
            if hit {
                detected[l - 1] += 1;
            }
        }
    }
    Some((detected, totals))
}

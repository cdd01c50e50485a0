//! Ranking metrics over single ground-truth labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// 1-based rank of `label` in `scores`; ties are ordered by item index.
pub fn rank_of<F: Real>(scores: &[F], label: usize) -> usize {
    let s = scores[label];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

/// Percentage of cases with `rank ≤ k` (hit rate).
pub fn precision_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(k)?;
    if ranks.is_empty() {
        return Ok(0.0);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Mean of `1/log2(1 + rank)` for hits within `k`, as a percentage.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(k)?;
    if ranks.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((1 + r) as f64).log2())
        .sum();
    Ok(100.0 * total / ranks.len() as f64)
}

fn check(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("K must be >= 1".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    #[serde(rename = "P@5")]
    pub p5: f64,
    #[serde(rename = "P@10")]
    pub p10: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    pub cases: usize,
}

impl RankingReport {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        RankingReport {
            p5: precision_at_k(ranks, 5).expect("k > 0"),
            p10: precision_at_k(ranks, 10).expect("k > 0"),
            ndcg5: ndcg_at_k(ranks, 5).expect("k > 0"),
            ndcg10: ndcg_at_k(ranks, 10).expect("k > 0"),
            cases: ranks.len(),
        }
    }
}

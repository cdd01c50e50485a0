//! Offline evaluation: ranking metrics, baselines, memory accounting and the
//! scoring-pass latency benchmark.

pub mod bench;
pub mod memory;
pub mod metrics;
pub mod ratios;

use crate::backbone::frozen::score_logits;
use crate::backbone::FrozenEncoder;
use crate::codec::CodeMatrix;
use crate::data::{eval_batches, SessionDataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub use bench::{bench_reconstruction, BenchConfig, LatencyReport, MethodTiming};
pub use memory::{memory_footprint, MemoryReport};
pub use metrics::{ndcg_at_k, precision_at_k, rank_of, RankingReport};

pub const EVAL_BATCH: usize = 100;

/// Rank of every label when scoring `seqs` against `table`.
pub fn rank_cases<F: Real>(
    enc: &FrozenEncoder<F>,
    table: &[F],
    seqs: &[Sequence],
    hot: &[bool],
) -> Result<Vec<usize>> {
    let n = enc.cfg.dim;
    let v = enc.cfg.num_items;
    let mut ranks = Vec::with_capacity(seqs.len());
    if seqs.is_empty() {
        return Ok(ranks);
    }
    for batch in eval_batches(seqs, hot, enc.cfg.max_len, EVAL_BATCH)? {
        let theta = enc.session_reps(table, &batch)?;
        let logits = score_logits(&theta, table, n);
        for (row, &label) in logits.chunks(v).zip(&batch.labels) {
            ranks.push(rank_of(row, label as usize));
        }
    }
    Ok(ranks)
}

pub fn evaluate<F: Real>(
    enc: &FrozenEncoder<F>,
    table: &[F],
    seqs: &[Sequence],
    hot: &[bool],
) -> Result<RankingReport> {
    Ok(RankingReport::from_ranks(&rank_cases(enc, table, seqs, hot)?))
}

/// Item frequencies over the training split (labels plus session starts).
pub fn train_popularity(ds: &SessionDataset) -> Vec<u64> {
    let mut counts = vec![0u64; ds.num_items()];
    for s in &ds.train {
        counts[s.label as usize] += 1;
        if s.prefix.len() == 1 {
            counts[s.prefix[0] as usize] += 1;
        }
    }
    counts
}

/// Recommends the same most-popular list to every session.
pub fn popularity_baseline(ds: &SessionDataset, seqs: &[Sequence]) -> RankingReport {
    let scores: Vec<f64> = train_popularity(ds).iter().map(|&c| c as f64).collect();
    let ranks: Vec<usize> = seqs.iter().map(|s| rank_of(&scores, s.label as usize)).collect();
    RankingReport::from_ranks(&ranks)
}

/// `M × K` counts of how often each codeword is used.
pub fn code_usage_histogram(codes: &CodeMatrix) -> Vec<Vec<u64>> {
    let mut h = vec![vec![0u64; codes.k]; codes.m];
    for item in codes.codes.chunks_exact(codes.m) {
        for (i, &c) in item.iter().enumerate() {
            h[i][c as usize] += 1;
        }
    }
    h
}

/// `book,codeword,count` rows with a header line.
pub fn histogram_csv(hist: &[Vec<u64>]) -> String {
    let mut out = String::from("book,codeword,count\n");
    for (i, row) in hist.iter().enumerate() {
        for (k, c) in row.iter().enumerate() {
            out.push_str(&format!("{i},{k},{c}\n"));
        }
    }
    out
}

pub(crate) fn require(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(what()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn histogram_partitions_items() {
        let c = CodeMatrix::new(5, 1, 4, vec![0; 5]).unwrap();
        assert_eq!(code_usage_histogram(&c), vec![vec![5, 0, 0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<u32> = (0..1000 * 3).map(|_| rng.random_range(0..32)).collect();
        let c = CodeMatrix::new(1000, 3, 32, codes.clone()).unwrap();
        let h = code_usage_histogram(&c);
        for (i, row) in h.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), 1000);
            for (k, &count) in row.iter().enumerate() {
                let want = (0..1000).filter(|&v| codes[v * 3 + i] == k as u32).count();
                assert_eq!(count as usize, want);
            }
        }
        let csv = histogram_csv(&h);
        assert_eq!(csv.lines().count(), 1 + 3 * 32);
    }
}

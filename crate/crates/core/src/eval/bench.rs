//! Single-threaded latency of a full scoring pass per embedding source.
//!
//! One pass over the workload materializes the candidate table from the
//! source, encodes and pools every session, and scores all items.

use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::require;
use crate::backbone::frozen::score_logits;
use crate::backbone::FrozenEncoder;
use crate::codec::{reconstruct_all, PackedCodes};
use crate::data::{Batch, Sequence};
use crate::error::Result;
use crate::ttd::Cores;

pub const MIN_REPS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 2;
pub const WORKLOAD_SESSIONS: usize = 100;

/// Where candidate embeddings come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    Dense(Vec<f32>),
    Codec(PackedCodes),
    Tt(Cores<f32>),
    Sttd(Cores<f32>),
}

impl EmbeddingSource {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingSource::Dense(_) => "dense",
            EmbeddingSource::Codec(_) => "codec",
            EmbeddingSource::Tt(_) => "tt",
            EmbeddingSource::Sttd(_) => "sttd",
        }
    }

    /// Fills `buf` with the full `|V| × N` table, or returns the dense table.
    fn table<'a>(&'a self, num_items: usize, buf: &'a mut [f32]) -> Result<&'a [f32]> {
        match self {
            EmbeddingSource::Dense(t) => Ok(t),
            EmbeddingSource::Codec(p) => {
                reconstruct_all(&p.codes, &p.books, p.dim, buf)?;
                Ok(buf)
            }
            EmbeddingSource::Tt(c) | EmbeddingSource::Sttd(c) => {
                c.reconstruct_all(num_items, buf)?;
                Ok(buf)
            }
        }
    }
}

/// A seeded set of sessions scored by every method.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub sessions: Vec<Sequence>,
    pub seed: u64,
}

impl Workload {
    /// Uniform random items; lengths `2 + Geom(0.2)`, capped at `max_len`.
    pub fn generate(num_items: usize, sessions: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sessions = (0..sessions)
            .map(|_| {
                let mut len = 2;
                while len < max_len && rng.random::<f64>() >= 0.2 {
                    len += 1;
                }
                let items: Vec<u32> = (0..len).map(|_| rng.random_range(0..num_items as u32)).collect();
                Sequence {
                    prefix: items[..len - 1].to_vec(),
                    label: items[len - 1],
                }
            })
            .collect();
        Workload { sessions, seed }
    }

    pub fn request_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.sessions {
            s.prefix.hash(&mut h);
            s.label.hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmups: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmups: DEFAULT_WARMUPS,
            reps: MIN_REPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub reps: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub times_s: Vec<f64>,
    pub request_hash: u64,
    /// Sum of the top score of every session; identical inputs give
    /// identical checksums across repetitions.
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub methods: Vec<MethodTiming>,
    pub warmups: usize,
    pub sessions: usize,
    pub num_items: usize,
    pub dim: usize,
    pub threads: usize,
    pub dtype: String,
}

impl LatencyReport {
    pub fn get(&self, method: &str) -> Option<&MethodTiming> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// `mean(slow) / mean(fast)`.
    pub fn speedup(&self, fast: &str, slow: &str) -> Option<f64> {
        Some(self.get(slow)?.mean_s / self.get(fast)?.mean_s)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>14} {:>12} {:>6}",
            "method", "mean (s)", "std (s)", "reps"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<8} {:>14.6} {:>12.6} {:>6}",
                m.method, m.mean_s, m.std_s, m.reps
            );
        }
        let _ = writeln!(
            out,
            "{} sessions, |V| = {}, N = {}, {} thread, {}",
            self.sessions, self.num_items, self.dim, self.threads, self.dtype
        );
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("method,reps,mean_s,std_s\n");
        for m in &self.methods {
            let _ = writeln!(out, "{},{},{},{}", m.method, m.reps, m.mean_s, m.std_s);
        }
        out
    }
}

fn scoring_pass(
    source: &EmbeddingSource,
    enc: &FrozenEncoder<f32>,
    batches: &[Batch],
    buf: &mut [f32],
) -> Result<f64> {
    let (v, n) = (enc.cfg.num_items, enc.cfg.dim);
    let table = source.table(v, buf)?;
    let mut checksum = 0.0;
    for batch in batches {
        let theta = enc.session_reps(table, batch)?;
        let logits = score_logits(&theta, table, n);
        for row in logits.chunks(v) {
            checksum += row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        }
    }
    Ok(black_box(checksum))
}

/// Times every source on the same workload, in order.
pub fn bench_reconstruction(
    sources: &[EmbeddingSource],
    enc: &FrozenEncoder<f32>,
    workload: &Workload,
    hot: &[bool],
    cfg: &BenchConfig,
) -> Result<LatencyReport> {
    require(cfg.reps >= MIN_REPS, || {
        format!("reps = {} is below the minimum of {MIN_REPS}", cfg.reps)
    })?;
    require(!sources.is_empty(), || "no methods to benchmark".into())?;
    let (v, n) = (enc.cfg.num_items, enc.cfg.dim);
    let batches: Vec<Batch> = workload
        .sessions
        .chunks(WORKLOAD_SESSIONS)
        .map(|c| {
            let refs: Vec<&Sequence> = c.iter().collect();
            Batch::from_sequences(&refs, hot, enc.cfg.max_len)
        })
        .collect::<Result<_>>()?;
    let mut buf = vec![0.0f32; v * n];
    let mut methods = Vec::with_capacity(sources.len());
    for source in sources {
        for _ in 0..cfg.warmups {
            scoring_pass(source, enc, &batches, &mut buf)?;
        }
        let mut times = Vec::with_capacity(cfg.reps);
        let mut checksum = 0.0;
        for _ in 0..cfg.reps {
            let start = Instant::now();
            checksum = scoring_pass(source, enc, &batches, &mut buf)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
        methods.push(MethodTiming {
            method: source.name().into(),
            reps: cfg.reps,
            mean_s: mean,
            std_s: var.sqrt(),
            times_s: times,
            request_hash: workload.request_hash(),
            checksum,
        });
    }
    Ok(LatencyReport {
        methods,
        warmups: cfg.warmups,
        sessions: workload.sessions.len(),
        num_items: v,
        dim: n,
        threads: 1,
        dtype: "f32".into(),
    })
}

//! Seeded synthetic session logs with power-law popularity and Markov structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Event, EventLog};
use crate::error::{Error, Result};

const POPULARITY_EXPONENT: f64 = 1.2;
/// Geometric continuation probability: length = 2 + Geom(0.2), mean 6.
const STOP_PROB: f64 = 0.2;
const NEIGHBORS_PER_ITEM: usize = 4;
const TELEPORT_PROB: f64 = 0.1;

/// Generates `num_sessions` sessions over `num_items` items.
///
/// Transitions mix a Metropolis–Hastings walk on a sparse random neighbor
/// graph with an occasional popularity-proportional jump. Both kernels leave
/// `π_i ∝ (i + 1)^-1.2` invariant, so long-run popularity follows the power
/// law while short-range transitions stay predictable.
pub fn gen_synthetic(num_items: usize, num_sessions: usize, seed: u64) -> Result<EventLog> {
    if num_items < 10 {
        return Err(Error::Parameter(format!(
            "synthetic corpus needs at least 10 items, got {num_items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..num_items)
        .map(|i| ((i + 1) as f64).powf(-POPULARITY_EXPONENT))
        .collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let sample_popular = |rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random();
        cdf.partition_point(|&c| c < u).min(num_items - 1)
    };

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); num_items];
    for i in 0..num_items {
        for _ in 0..NEIGHBORS_PER_ITEM {
            let j = rng.random_range(0..num_items);
            if j != i && !neighbors[i].contains(&j) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }

    let mut events = Vec::new();
    for s in 0..num_sessions {
        let mut len = 2;
        while rng.random::<f64>() >= STOP_PROB {
            len += 1;
        }
        let session_id = format!("s{s:06}");
        let mut t = s as u64 * 10_000;
        let mut cur = sample_popular(&mut rng);
        for step in 0..len {
            if step > 0 {
                cur = if rng.random::<f64>() < TELEPORT_PROB || neighbors[cur].is_empty() {
                    sample_popular(&mut rng)
                } else {
                    let nb = &neighbors[cur];
                    let j = nb[rng.random_range(0..nb.len())];
                    let accept = (weights[j] * nb.len() as f64)
                        / (weights[cur] * neighbors[j].len() as f64);
                    if rng.random::<f64>() < accept.min(1.0) {
                        j
                    } else {
                        cur
                    }
                };
                t += rng.random_range(1..120);
            }
            events.push(Event {
                session_id: session_id.clone(),
                item_id: format!("i{cur:05}"),
                timestamp: t,
            });
        }
    }
    Ok(EventLog { events })
}

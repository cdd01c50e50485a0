//! Session logs: ingestion, filtering, next-item splits and popularity.
//!
//! The protocol is:
//!
//! 1. group events into sessions ordered by timestamp ([`ingest`]);
//! 2. drop items seen fewer than [`MIN_ITEM_COUNT`] times, then sessions left
//!    with one item or fewer, hold out each session's last item as the test
//!    label, and move a seeded 10% of training sessions to validation
//!    ([`filter_and_split`]);
//! 3. expand every training session `[v1..vl]` into the `l - 1` prefix/label
//!    pairs `([v1], v2) .. ([v1..v(l-1)], vl)` ([`augment`]).
//!
//! Popularity is counted on the training sessions only. The top
//! `ceil(0.2·|V|)` items by count are hot, ties going to the smaller index.

mod batch;
pub mod cache;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{eval_batches, make_batches, Batch};
pub use synthetic::gen_synthetic;

use crate::error::{Error, Result};

pub const MIN_ITEM_COUNT: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 50;
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const HOT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

/// Raw interaction records, in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    /// Parses `session_id \t item_id \t timestamp` lines. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty session or item id".into(),
                });
            }
            let timestamp = fields[2].trim().parse::<u64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad timestamp `{}`: {e}", fields[2]),
            })?;
            events.push(Event {
                session_id: fields[0].to_string(),
                item_id: fields[1].to_string(),
                timestamp,
            });
        }
        Ok(EventLog { events })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        EventLog::parse(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# session_id\titem_id\ttimestamp\n");
        for e in &self.events {
            out.push_str(&format!("{}\t{}\t{}\n", e.session_id, e.item_id, e.timestamp));
        }
        out
    }
}

/// One session's items in time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub items: Vec<String>,
}

/// Groups events by session (first-appearance order) and sorts each session
/// by timestamp; equal timestamps keep input order.
pub fn ingest(log: &EventLog) -> Vec<RawSession> {
    let mut groups: IndexMap<&str, Vec<(u64, &str)>> = IndexMap::new();
    for e in &log.events {
        groups
            .entry(e.session_id.as_str())
            .or_default()
            .push((e.timestamp, e.item_id.as_str()));
    }
    groups
        .into_iter()
        .map(|(id, mut evs)| {
            evs.sort_by_key(|&(t, _)| t);
            RawSession {
                id: id.to_string(),
                items: evs.into_iter().map(|(_, it)| it.to_string()).collect(),
            }
        })
        .collect()
}

/// Item id ↔ contiguous index, with training popularity and hot flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVocab {
    pub ids: Vec<String>,
    pub counts: Vec<u64>,
    pub hot: Vec<bool>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl ItemVocab {
    pub fn new(ids: Vec<String>, counts: Vec<u64>) -> Self {
        let hot = partition_hot_cold(&counts);
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        ItemVocab {
            ids,
            counts,
            hot,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reserved index one past the last real item.
    pub fn pad_index(&self) -> u32 {
        self.ids.len() as u32
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn num_hot(&self) -> usize {
        self.hot.iter().filter(|&&h| h).count()
    }
}

/// Marks the top `ceil(0.2·|V|)` items by count as hot; ties favor the
/// smaller index.
pub fn partition_hot_cold(counts: &[u64]) -> Vec<bool> {
    let n = counts.len();
    let n_hot = (HOT_FRACTION * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut hot = vec![false; n];
    for &i in order.iter().take(n_hot) {
        hot[i] = true;
    }
    hot
}

/// A labeled next-item example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub prefix: Vec<u32>,
    pub label: u32,
}

impl Sequence {
    /// Builds a pair, keeping only the most recent `max_len` prefix items.
    pub fn truncated(prefix: &[u32], label: u32, max_len: usize) -> Self {
        let start = prefix.len().saturating_sub(max_len);
        Sequence {
            prefix: prefix[start..].to_vec(),
            label,
        }
    }
}

/// Output of [`filter_and_split`]: training sessions not yet expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSessions {
    pub vocab: ItemVocab,
    pub train_sessions: Vec<Vec<u32>>,
    pub valid: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub max_len: usize,
    /// Mean length of the sessions that survived filtering (before holdout).
    pub avg_session_length: f64,
}

/// Final dataset with augmented training pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionDataset {
    pub vocab: ItemVocab,
    pub train: Vec<Sequence>,
    pub valid: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub max_len: usize,
    pub num_train_sessions: usize,
    pub avg_session_length: f64,
}

impl SessionDataset {
    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    /// Table-2 style summary.
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            train_sessions: self.num_train_sessions,
            train_sequences: self.train.len(),
            valid_sequences: self.valid.len(),
            test_sessions: self.test.len(),
            items: self.num_items(),
            hot_items: self.vocab.num_hot(),
            avg_length: self.avg_session_length,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_sessions: usize,
    pub train_sequences: usize,
    pub valid_sequences: usize,
    pub test_sessions: usize,
    pub items: usize,
    pub hot_items: usize,
    pub avg_length: f64,
    pub max_len: usize,
}

/// Applies the filtering and holdout rules in a single pass.
pub fn filter_and_split(sessions: &[RawSession], seed: u64, max_len: usize) -> Result<SplitSessions> {
    if sessions.is_empty() {
        return Err(Error::Data("no sessions to split".into()));
    }
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sessions {
        for it in &s.items {
            *counts.entry(it.as_str()).or_default() += 1;
        }
    }
    let mut ids: IndexMap<&str, u32> = IndexMap::new();
    let mut kept: Vec<Vec<u32>> = Vec::new();
    for s in sessions {
        let frequent: Vec<&str> = s
            .items
            .iter()
            .map(String::as_str)
            .filter(|it| counts[it] >= MIN_ITEM_COUNT)
            .collect();
        if frequent.len() <= 1 {
            continue;
        }
        let encoded = frequent
            .into_iter()
            .map(|it| {
                let next = ids.len() as u32;
                *ids.entry(it).or_insert(next)
            })
            .collect();
        kept.push(encoded);
    }
    if kept.is_empty() {
        return Err(Error::Data(
            "no sessions left after filtering rare items and length-1 sessions".into(),
        ));
    }
    let avg_session_length = kept.iter().map(Vec::len).sum::<usize>() as f64 / kept.len() as f64;

    let mut test = Vec::with_capacity(kept.len());
    let mut train_sessions = Vec::with_capacity(kept.len());
    for s in &kept {
        let l = s.len();
        test.push(Sequence::truncated(&s[..l - 1], s[l - 1], max_len));
        train_sessions.push(s[..l - 1].to_vec());
    }

    // Validation: a seeded sample of training sessions long enough to form a pair.
    let mut eligible: Vec<usize> = (0..train_sessions.len())
        .filter(|&i| train_sessions[i].len() >= 2)
        .collect();
    let n_valid = (VALIDATION_FRACTION * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut chosen: Vec<usize> = eligible[..n_valid].to_vec();
    chosen.sort_unstable();
    let mut valid = Vec::with_capacity(n_valid);
    let mut is_valid = vec![false; train_sessions.len()];
    for &i in &chosen {
        is_valid[i] = true;
        let t = &train_sessions[i];
        valid.push(Sequence::truncated(&t[..t.len() - 1], t[t.len() - 1], max_len));
    }
    let train_sessions: Vec<Vec<u32>> = train_sessions
        .into_iter()
        .zip(is_valid)
        .filter_map(|(s, v)| (!v).then_some(s))
        .collect();

    let mut item_counts = vec![0u64; ids.len()];
    for s in &train_sessions {
        for &i in s {
            item_counts[i as usize] += 1;
        }
    }
    let vocab = ItemVocab::new(ids.keys().map(|s| s.to_string()).collect(), item_counts);
    Ok(SplitSessions {
        vocab,
        train_sessions,
        valid,
        test,
        max_len,
        avg_session_length,
    })
}

/// Expands each training session of length `l` into its `l - 1` prefix/label pairs.
pub fn augment(split: SplitSessions) -> Result<SessionDataset> {
    let mut train = Vec::new();
    for s in &split.train_sessions {
        for end in 1..s.len() {
            train.push(Sequence::truncated(&s[..end], s[end], split.max_len));
        }
    }
    if train.is_empty() {
        return Err(Error::Data("augmentation produced no training pairs".into()));
    }
    Ok(SessionDataset {
        vocab: split.vocab,
        train,
        valid: split.valid,
        test: split.test,
        max_len: split.max_len,
        num_train_sessions: split.train_sessions.len(),
        avg_session_length: split.avg_session_length,
    })
}

/// Ingest, filter, split and augment in one call.
pub fn build_dataset(log: &EventLog, seed: u64, max_len: usize) -> Result<SessionDataset> {
    augment(filter_and_split(&ingest(log), seed, max_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, items: &[&str]) -> RawSession {
        RawSession {
            id: id.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ingest_groups_and_sorts() {
        let log = EventLog::parse(
            "# header\ns1\ta\t30\ns2\tx\t5\ns1\tb\t10\ns1\tc\t20\ns2\ty\t1\ns2\tz\t5\n",
        )
        .unwrap();
        let sessions = ingest(&log);
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].items, ["b", "c", "a"]);
        // tie at t=5 keeps input order (x before z)
        assert_eq!(sessions[1].items, ["y", "x", "z"]);
    }

    #[test]
    fn parse_reports_line_of_missing_field() {
        let err = EventLog::parse("s1\ta\t1\n#c\ns1\tb\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = EventLog::parse("s1\ta\tminus\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = EventLog::parse("s1\ta\t-4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn frequent_corpus() -> Vec<RawSession> {
        // a, b, c appear 5+ times; "rare" appears 4 times.
        let mut s = Vec::new();
        for i in 0..5 {
            s.push(raw(&format!("s{i}"), &["a", "b", "c"]));
        }
        for i in 0..4 {
            s.push(raw(&format!("r{i}"), &["a", "rare"]));
        }
        s
    }

    #[test]
    fn rare_items_and_short_sessions_are_dropped() {
        let split = filter_and_split(&frequent_corpus(), 0, 50).unwrap();
        assert!(split.vocab.index_of("rare").is_none());
        assert_eq!(split.vocab.len(), 3);
        // the four [a, rare] sessions shrink to [a] and are dropped
        assert_eq!(split.test.len(), 5);
        let (a, b, c) = (0, 1, 2);
        assert!(split.test.iter().all(|t| t.prefix == [a, b] && t.label == c));
    }

    #[test]
    fn everything_filtered_is_data_error() {
        let s = vec![raw("s", &["a", "b"])];
        assert!(matches!(filter_and_split(&s, 0, 50), Err(Error::Data(_))));
        assert!(matches!(filter_and_split(&[], 0, 50), Err(Error::Data(_))));
    }

    #[test]
    fn augment_emits_every_prefix() {
        let split = SplitSessions {
            vocab: ItemVocab::new(vec!["a".into(), "b".into(), "c".into()], vec![1, 1, 1]),
            train_sessions: vec![vec![0, 1, 2], vec![2, 0]],
            valid: vec![],
            test: vec![],
            max_len: 50,
            avg_session_length: 0.0,
        };
        let ds = augment(split).unwrap();
        assert_eq!(
            ds.train,
            vec![
                Sequence { prefix: vec![0], label: 1 },
                Sequence { prefix: vec![0, 1], label: 2 },
                Sequence { prefix: vec![2], label: 0 },
            ]
        );
    }

    #[test]
    fn augment_count_for_uniform_sessions() {
        let split = SplitSessions {
            vocab: ItemVocab::new((0..5).map(|i| i.to_string()).collect(), vec![0; 5]),
            train_sessions: (0..100).map(|i| (0..5).map(|j| ((i + j) % 5) as u32).collect()).collect(),
            valid: vec![],
            test: vec![],
            max_len: 50,
            avg_session_length: 0.0,
        };
        // Σ(l − 1) oracle
        let expected: usize = split.train_sessions.iter().map(|s| s.len() - 1).sum();
        assert_eq!(expected, 400);
        assert_eq!(augment(split).unwrap().train.len(), 400);
    }

    #[test]
    fn hot_cold_rules() {
        let counts: Vec<u64> = vec![5, 1, 9, 3, 7, 2, 8, 4, 6, 0];
        let hot = partition_hot_cold(&counts);
        assert_eq!(hot.iter().filter(|&&h| h).count(), 2);
        assert!(hot[2] && hot[6]);

        let hot = partition_hot_cold(&[3; 10]);
        assert!(hot[0] && hot[1] && hot[2..].iter().all(|&h| !h));

        assert_eq!(partition_hot_cold(&[1, 2, 3, 4, 5]).iter().filter(|&&h| h).count(), 1);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let s = Sequence::truncated(&[1, 2, 3, 4, 5], 6, 3);
        assert_eq!(s.prefix, [3, 4, 5]);
    }
}

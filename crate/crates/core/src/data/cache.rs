//! On-disk dataset cache.
//!
//! Layout of a cache directory:
//!
//! * `dataset.json`: format tag, vocabulary (ids and training counts),
//!   `max_len`, session counts and an `arrays` table of
//!   `{name, offset, len}` entries (offset in bytes, len in elements);
//! * `dataset.bin`: the arrays, each a run of little-endian `u32`.
//!
//! Every split is stored as three arrays: `<split>.offsets` (`n + 1` prefix
//! boundaries), `<split>.items` (concatenated prefixes) and `<split>.labels`.
//! Hot flags are recomputed from the counts on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ItemVocab, SessionDataset, Sequence};
use crate::error::{Error, Result};

pub const FORMAT: &str = "compact-rec/dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "dataset.json";
pub const BLOB: &str = "dataset.bin";
pub const STATS: &str = "stats.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub version: u32,
    pub max_len: usize,
    pub num_train_sessions: usize,
    pub avg_session_length: f64,
    pub item_ids: Vec<String>,
    pub item_counts: Vec<u64>,
    pub arrays: Vec<ArrayEntry>,
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn splits(ds: &SessionDataset) -> [&Vec<Sequence>; 3] {
    [&ds.train, &ds.valid, &ds.test]
}

/// Serializes a dataset into `(manifest, blob)` bytes.
pub fn to_bytes(ds: &SessionDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    let mut push = |name: String, values: &[u32], blob: &mut Vec<u8>| {
        arrays.push(ArrayEntry {
            name,
            offset: blob.len() as u64,
            len: values.len() as u64,
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, seqs) in SPLITS.iter().zip(splits(ds)) {
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        let mut items = Vec::new();
        offsets.push(0u32);
        for s in seqs {
            items.extend_from_slice(&s.prefix);
            offsets.push(items.len() as u32);
        }
        let labels: Vec<u32> = seqs.iter().map(|s| s.label).collect();
        push(format!("{name}.offsets"), &offsets, &mut blob);
        push(format!("{name}.items"), &items, &mut blob);
        push(format!("{name}.labels"), &labels, &mut blob);
    }
    let manifest = CacheManifest {
        format: FORMAT.into(),
        version: VERSION,
        max_len: ds.max_len,
        num_train_sessions: ds.num_train_sessions,
        avg_session_length: ds.avg_session_length,
        item_ids: ds.vocab.ids.clone(),
        item_counts: ds.vocab.counts.clone(),
        arrays,
    };
    Ok((serde_json::to_vec_pretty(&manifest)?, blob))
}

pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<SessionDataset> {
    let m: CacheManifest = serde_json::from_slice(manifest)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset cache {} v{}",
            m.format, m.version
        )));
    }
    if m.item_ids.len() != m.item_counts.len() {
        return Err(Error::Format("item ids and counts differ in length".into()));
    }
    let array = |name: &str| -> Result<Vec<u32>> {
        let e = m
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("dataset cache lacks array `{name}`")))?;
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + 4 * e.len as usize)
            .ok_or_else(|| Error::Format(format!("array `{name}` overruns the blob")))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };
    let n_items = m.item_ids.len() as u32;
    let mut out: Vec<Vec<Sequence>> = Vec::with_capacity(3);
    for name in SPLITS {
        let offsets = array(&format!("{name}.offsets"))?;
        let items = array(&format!("{name}.items"))?;
        let labels = array(&format!("{name}.labels"))?;
        if offsets.len() != labels.len() + 1 || *offsets.last().unwrap_or(&1) as usize != items.len() {
            return Err(Error::Format(format!("inconsistent `{name}` arrays")));
        }
        let mut seqs = Vec::with_capacity(labels.len());
        for (w, &label) in offsets.windows(2).zip(&labels) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            if a > b || b > items.len() {
                return Err(Error::Format(format!("bad offsets in `{name}`")));
            }
            let prefix = items[a..b].to_vec();
            if prefix.iter().chain(std::iter::once(&label)).any(|&i| i >= n_items) {
                return Err(Error::Format(format!("item index out of range in `{name}`")));
            }
            seqs.push(Sequence { prefix, label });
        }
        out.push(seqs);
    }
    let test = out.pop().expect("three splits");
    let valid = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(SessionDataset {
        vocab: ItemVocab::new(m.item_ids, m.item_counts),
        train,
        valid,
        test,
        max_len: m.max_len,
        num_train_sessions: m.num_train_sessions,
        avg_session_length: m.avg_session_length,
    })
}

/// Writes the cache and `stats.json` into `dir`.
pub fn save(ds: &SessionDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = to_bytes(ds)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(BLOB), blob)?;
    fs::write(dir.join(STATS), serde_json::to_vec_pretty(&ds.stats())?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SessionDataset> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingInput(mpath));
    }
    let bpath = dir.join(BLOB);
    if !bpath.exists() {
        return Err(Error::MissingInput(bpath));
    }
    from_bytes(&fs::read(mpath)?, &fs::read(bpath)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, gen_synthetic};

    #[test]
    fn round_trip_is_exact() {
        let log = gen_synthetic(60, 300, 2).unwrap();
        let ds = build_dataset(&log, 2, 50).unwrap();
        let (m, b) = to_bytes(&ds).unwrap();
        let back = from_bytes(&m, &b).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.vocab.index_of(&ds.vocab.ids[3]), Some(3));
    }

    #[test]
    fn blob_is_u32_le() {
        let log = gen_synthetic(60, 300, 2).unwrap();
        let ds = build_dataset(&log, 2, 50).unwrap();
        let (m, b) = to_bytes(&ds).unwrap();
        let man: CacheManifest = serde_json::from_slice(&m).unwrap();
        let labels = man.arrays.iter().find(|e| e.name == "test.labels").unwrap();
        let o = labels.offset as usize;
        assert_eq!(u32::from_le_bytes(b[o..o + 4].try_into().unwrap()), ds.test[0].label);
        assert_eq!(b.len() % 4, 0);
    }

    #[test]
    fn missing_directory_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::MissingInput(_))));
    }
}

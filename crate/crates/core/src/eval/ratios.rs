//! Codebook compression ratios on the reference `|V| = 20000`, `N = 100` grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::compression_ratio;
use crate::error::Result;

pub const GRID_ITEMS: u64 = 20_000;
pub const GRID_DIM: u64 = 100;

/// `(M, K, size after compression, integer compression ratio)` as published.
/// The seventh row's size only holds for `K = 32`.
pub const REFERENCE_ROWS: [(u64, u64, u64, u64); 9] = [
    (2, 8, 41_600, 48),
    (2, 128, 65_600, 30),
    (2, 512, 142_400, 14),
    (4, 8, 83_200, 24),
    (4, 128, 131_200, 15),
    (4, 512, 284_800, 7),
    (8, 32, 185_600, 11),
    (8, 128, 262_400, 8),
    (8, 512, 569_600, 3),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    pub m: u64,
    pub k: u64,
    pub size: u64,
    pub expected_size: u64,
    pub ratio: f64,
    pub floor: u64,
    pub nearest: u64,
    pub expected_ratio: u64,
}

impl RatioCheck {
    pub fn size_ok(&self) -> bool {
        self.size == self.expected_size
    }

    /// Integer ratio taken as the floor of the exact ratio.
    pub fn floor_ok(&self) -> bool {
        self.floor == self.expected_ratio
    }

    pub fn matches(&self) -> bool {
        self.size_ok() && self.floor_ok()
    }
}

pub fn check_ratios() -> Result<Vec<RatioCheck>> {
    REFERENCE_ROWS
        .iter()
        .map(|&(m, k, expected_size, expected_ratio)| {
            let r = compression_ratio(GRID_ITEMS, GRID_DIM, m, k)?;
            Ok(RatioCheck {
                m,
                k,
                size: r.compressed,
                expected_size,
                ratio: r.value(),
                floor: r.floor(),
                nearest: r.nearest(),
                expected_ratio,
            })
        })
        .collect()
}

pub fn ratio_table(rows: &[RatioCheck]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>3} {:>4} {:>8} {:>9} {:>8} {:>6} {:>8} {:>9}  status",
        "M", "K", "size", "expected", "ratio", "floor", "nearest", "expected"
    );
    for r in rows {
        let status = match (r.size_ok(), r.floor_ok()) {
            (true, true) => "match",
            (false, _) => "SIZE MISMATCH",
            (true, false) => "RATIO MISMATCH",
        };
        let _ = writeln!(
            out,
            "{:>3} {:>4} {:>8} {:>9} {:>8.3} {:>6} {:>8} {:>9}  {status}",
            r.m, r.k, r.size, r.expected_size, r.ratio, r.floor, r.nearest, r.expected_ratio
        );
    }
    let ok = rows.iter().filter(|r| r.matches()).count();
    let _ = writeln!(out, "{ok}/{} rows match", rows.len());
    out
}

//! Parameter and byte accounting for the embedding sources.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::packed::{bytes_per_item, HEADER_LEN};
use crate::codec::{compression_ratio, PackedCodes};
use crate::error::{Error, Result};
use crate::ttd::TTConfig;

const F32: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSize {
    pub name: String,
    pub params: u64,
    /// Bytes predicted from the shape formulas.
    pub formula_bytes: u64,
    /// Bytes of the serialized artifact, when one was measured.
    pub file_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub num_items: u64,
    pub dim: u64,
    pub components: Vec<ComponentSize>,
    /// Dense parameters over `M·K·N + M·|V|`.
    pub codec_ratio: f64,
    pub codec_ratio_floor: u64,
    /// Dense f32 bytes over the packed file bytes.
    pub codec_byte_ratio: f64,
    pub sttd_ratio: Option<f64>,
}

impl MemoryReport {
    pub fn component(&self, name: &str) -> Option<&ComponentSize> {
        self.components.iter().find(|c| c.name == name)
    }
}

/// Dense f32 table bytes.
pub fn dense_bytes(num_items: u64, dim: u64) -> u64 {
    num_items * dim * F32
}

/// Code bits rounded up once for the whole matrix, plus f32 codebooks.
pub fn codec_formula_bytes(num_items: u64, m: u64, k: u64, dim: u64) -> u64 {
    let bits = num_items * m * k.trailing_zeros() as u64;
    bits.div_ceil(8) + m * k * dim * F32
}

/// Measures the packed code file at `packed` and checks it against the
/// formulas. `backbone_params` counts the encoder weights (excluding any item
/// table); `tt` adds an STTD row for comparison.
pub fn memory_footprint(
    packed: &Path,
    backbone_params: u64,
    tt: Option<&TTConfig>,
) -> Result<MemoryReport> {
    if !packed.exists() {
        return Err(Error::MissingInput(packed.to_path_buf()));
    }
    let file_bytes = fs::metadata(packed)?.len();
    let codes = PackedCodes::load(packed)?;
    let (v, m, k, n) = (
        codes.codes.num_items as u64,
        codes.codes.m as u64,
        codes.codes.k as u64,
        codes.dim as u64,
    );
    let formula = codec_formula_bytes(v, m, k, n);
    // header plus per-item byte padding, which the formula does not count
    let padding = v * bytes_per_item(m as usize, k as usize) as u64 - (v * m * k.trailing_zeros() as u64).div_ceil(8);
    let overhead = HEADER_LEN as u64 + padding;
    if file_bytes != formula + overhead {
        return Err(Error::Accounting(format!(
            "packed file is {file_bytes} bytes; formula {formula} + header/padding {overhead} = {}",
            formula + overhead
        )));
    }
    let ratio = compression_ratio(v, n, m, k)?;
    let mut components = vec![
        ComponentSize {
            name: "dense".into(),
            params: v * n,
            formula_bytes: dense_bytes(v, n),
            file_bytes: None,
        },
        ComponentSize {
            name: "codec".into(),
            params: m * k * n + m * v,
            formula_bytes: formula,
            file_bytes: Some(file_bytes),
        },
        ComponentSize {
            name: "backbone".into(),
            params: backbone_params,
            formula_bytes: backbone_params * F32,
            file_bytes: None,
        },
    ];
    let mut sttd_ratio = None;
    if let Some(cfg) = tt {
        let p = cfg.num_params() as u64;
        components.push(ComponentSize {
            name: "sttd".into(),
            params: p,
            formula_bytes: p * F32,
            file_bytes: None,
        });
        sttd_ratio = Some((v * n) as f64 / p as f64);
    }
    Ok(MemoryReport {
        num_items: v,
        dim: n,
        components,
        codec_ratio: ratio.value(),
        codec_ratio_floor: ratio.floor(),
        codec_byte_ratio: dense_bytes(v, n) as f64 / file_bytes as f64,
        sttd_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodeMatrix;
    use crate::tensor::Tensor;

    #[test]
    fn dense_size_arithmetic() {
        assert_eq!(dense_bytes(20_000, 100), 8_000_000);
    }

    #[test]
    fn packed_file_matches_formula() {
        let dir = tempfile::tempdir().unwrap();
        for (v, m, k) in [(10usize, 3usize, 8usize), (37, 4, 32), (5, 1, 2)] {
            let codes = CodeMatrix::new(v, m, k, vec![1; v * m]).unwrap();
            let p = PackedCodes::new(codes, &Tensor::zeros(&[m * k, 6])).unwrap();
            let path = dir.path().join(format!("c{v}.bin"));
            p.save(&path).unwrap();
            let r = memory_footprint(&path, 100, None).unwrap();
            let c = r.component("codec").unwrap();
            assert_eq!(c.params, (m * k * 6 + m * v) as u64);
            assert!(c.file_bytes.unwrap() >= c.formula_bytes);
            assert!(c.file_bytes.unwrap() - c.formula_bytes < (HEADER_LEN + v) as u64);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"CCEC").unwrap();
        assert!(memory_footprint(&path, 0, None).is_err());
        assert!(matches!(
            memory_footprint(&dir.path().join("none.bin"), 0, None),
            Err(Error::MissingInput(_))
        ));
    }
}

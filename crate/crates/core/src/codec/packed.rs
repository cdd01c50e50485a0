//! Packed binary format for a deployed codec.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CCEC"
//! 4       4     version (u32 LE)
//! 8       8     |V| (u64 LE)
//! 16      4     M (u32 LE)
//! 20      4     K (u32 LE)
//! 24      4     N (u32 LE)
//! 28      1     dtype (0 = f32)
//! 29      ...   codes: per item, M codes of log2(K) bits, MSB-first,
//!               padded to a whole byte
//! ...     4MKN  codebooks, f32 LE, row-major [M][K][N]
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{reconstruct_all, reconstruct_rows, CodeMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CCEC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 29;

/// Hard codes plus f32 codebooks: the on-device embedding source.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedCodes {
    pub codes: CodeMatrix,
    pub dim: usize,
    /// `[M·K, N]` row-major.
    pub books: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Header {
    pub magic: String,
    pub version: u32,
    pub num_items: u64,
    pub m: u32,
    pub k: u32,
    pub dim: u32,
    pub dtype: u8,
}

pub fn bytes_per_item(m: usize, k: usize) -> usize {
    let bits = m * k.trailing_zeros() as usize;
    bits.div_ceil(8)
}

/// Exact file size for the given shape.
pub fn file_size(num_items: usize, m: usize, k: usize, dim: usize) -> usize {
    HEADER_LEN + num_items * bytes_per_item(m, k) + 4 * m * k * dim
}

impl PackedCodes {
    pub fn new(codes: CodeMatrix, books: &Tensor) -> Result<Self> {
        if !codes.k.is_power_of_two() || codes.k < 2 {
            return Err(Error::Parameter(format!("K = {} is not a power of two", codes.k)));
        }
        if books.rank() != 2 || books.rows() != codes.m * codes.k {
            return Err(Error::dim("packed codebooks", books.shape(), &[codes.m * codes.k]));
        }
        Ok(PackedCodes {
            dim: books.cols(),
            books: books.to_f32(),
            codes,
        })
    }

    pub fn header(&self) -> Header {
        Header {
            magic: String::from_utf8_lossy(MAGIC).into_owned(),
            version: VERSION,
            num_items: self.codes.num_items as u64,
            m: self.codes.m as u32,
            k: self.codes.k as u32,
            dim: self.dim as u32,
            dtype: DTYPE_F32,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, k) = (self.codes.m, self.codes.k);
        let bits = k.trailing_zeros();
        let per_item = bytes_per_item(m, k);
        let mut out = Vec::with_capacity(file_size(self.codes.num_items, m, k, self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.codes.num_items as u64).to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(DTYPE_F32);
        for code in self.codes.codes.chunks_exact(m) {
            let start = out.len();
            out.resize(start + per_item, 0);
            let mut pos = 0usize;
            for &c in code {
                for b in (0..bits).rev() {
                    if (c >> b) & 1 == 1 {
                        out[start + pos / 8] |= 0x80 >> (pos % 8);
                    }
                    pos += 1;
                }
            }
        }
        for v in &self.books {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "packed code file is {} bytes, shorter than its header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported packed code version {version} (expected {VERSION})"
            )));
        }
        let num_items = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let (m, k, dim) = (u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize);
        if bytes[28] != DTYPE_F32 {
            return Err(Error::Format(format!("unknown dtype tag {}", bytes[28])));
        }
        if m == 0 || dim == 0 || k < 2 || !k.is_power_of_two() {
            return Err(Error::Format(format!("invalid shape M={m}, K={k}, N={dim}")));
        }
        let expected = file_size(num_items, m, k, dim);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "packed code file is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let bits = k.trailing_zeros();
        let per_item = bytes_per_item(m, k);
        let mut codes = Vec::with_capacity(num_items * m);
        for item in bytes[HEADER_LEN..HEADER_LEN + num_items * per_item].chunks_exact(per_item) {
            let mut pos = 0usize;
            for _ in 0..m {
                let mut c = 0u32;
                for _ in 0..bits {
                    let bit = (item[pos / 8] >> (7 - pos % 8)) & 1;
                    c = (c << 1) | bit as u32;
                    pos += 1;
                }
                codes.push(c);
            }
        }
        let books = bytes[HEADER_LEN + num_items * per_item..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(PackedCodes {
            codes: CodeMatrix::new(num_items, m, k, codes)?,
            dim,
            books,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        PackedCodes::from_bytes(&fs::read(path)?)
    }

    pub fn reconstruct_all(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.codes.num_items * self.dim];
        reconstruct_all(&self.codes, &self.books, self.dim, &mut out).expect("consistent shapes");
        out
    }

    pub fn reconstruct_rows(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; indices.len() * self.dim];
        reconstruct_rows(&self.codes, &self.books, self.dim, indices, &mut out)?;
        Ok(out)
    }

    /// Human-readable dump: header, sizes and every item's code tuple.
    pub fn inspect_json(&self) -> serde_json::Value {
        let codes: Vec<&[u32]> = (0..self.codes.num_items).map(|v| self.codes.item(v)).collect();
        serde_json::json!({
            "header": self.header(),
            "bits_per_code": self.codes.k.trailing_zeros(),
            "code_bytes_per_item": bytes_per_item(self.codes.m, self.codes.k),
            "code_bytes": self.codes.num_items * bytes_per_item(self.codes.m, self.codes.k),
            "codebook_bytes": 4 * self.books.len(),
            "file_bytes": file_size(self.codes.num_items, self.codes.m, self.codes.k, self.dim),
            "codes": codes,
        })
    }
}

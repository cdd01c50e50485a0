//! Compositional codes: every item is the sum of one codeword from each of
//! `M` codebooks of `K` vectors.
//!
//! Code learning relaxes each one-hot code to a Gumbel-Softmax sample
//!
//! ```text
//! h   = tanh(x θ + b)                      (MK/2)
//! α   = softmax_K(softplus(h θ' + b'))     (M groups of K)
//! O   = softmax_K((log α + G) / ε),  G = −log(−log U)
//! e   = Σ_i O_i E_i
//! ```
//!
//! and trains on `mean_v ‖e_v − x_v‖²`. Deployment keeps only the hard codes
//! `argmax α` and the codebooks.

pub mod packed;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use packed::PackedCodes;
pub use train::{train_codes, CodeTrainConfig, CodeTrainReport};

pub const ALPHA_FLOOR: f64 = 1e-10;
pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MIXUP: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub m: usize,
    pub k: usize,
    pub dim: usize,
    /// Gumbel-Softmax temperature ε.
    pub temperature: f64,
    /// Mixup weight η on the original embedding.
    pub mixup: f64,
}

impl CodecConfig {
    pub fn new(m: usize, k: usize, dim: usize) -> Self {
        CodecConfig {
            m,
            k,
            dim,
            temperature: DEFAULT_TEMPERATURE,
            mixup: DEFAULT_MIXUP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.dim == 0 {
            return Err(Error::Parameter("M and N must be >= 1".into()));
        }
        if self.k < 2 || !self.k.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "K must be a power of two >= 2, got {}",
                self.k
            )));
        }
        if (self.m * self.k) % 2 != 0 {
            return Err(Error::Parameter("M·K must be even".into()));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        check_mixup(self.mixup)
    }

    pub fn hidden(&self) -> usize {
        self.m * self.k / 2
    }

    pub fn bits_per_code(&self) -> u32 {
        self.k.trailing_zeros()
    }
}

fn check_mixup(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Parameter(format!("mixup η must be in (0, 1), got {eta}")));
    }
    Ok(())
}

param_group! {
    /// Code MLP and the stacked codebooks (`books` is `[M·K, N]`, book `i`
    /// occupying rows `i·K .. (i+1)·K`).
    pub struct CodecParams => CodecVars {
        theta, b, theta2, b2, books,
    }
}

impl CodecParams {
    pub fn init<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let (h, mk, n) = (cfg.hidden(), cfg.m * cfg.k, cfg.dim);
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -0.1, 0.1, rng);
        CodecParams {
            theta: u(&[n, h]),
            b: u(&[h]),
            theta2: u(&[h, mk]),
            b2: u(&[mk]),
            books: u(&[mk, n]),
        }
    }
}

/// Code distributions α for the rows of `x` (`[R, N]`), as `[R·M, K]`.
pub fn code_probs(tape: &mut Tape, cfg: &CodecConfig, p: &CodecVars, x: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let h = tape.matmul(x, p.theta)?;
    let h = tape.add_row(h, p.b)?;
    let h = tape.tanh(h);
    let z = tape.matmul(h, p.theta2)?;
    let z = tape.add_row(z, p.b2)?;
    let z = tape.softplus(z);
    let z = tape.reshape(z, &[rows * cfg.m, cfg.k])?;
    tape.softmax(z, 1.0)
}

/// i.i.d. standard Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            -(-u.max(f64::MIN_POSITIVE).ln()).ln()
        })
        .collect()
}

/// Relaxed one-hot codes `softmax((log α + G) / ε)`; `noise = None` is the
/// noise-free mode (`G = 0`).
pub fn gumbel_softmax(
    tape: &mut Tape,
    alpha: Var,
    temperature: f64,
    noise: Option<&[f64]>,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let a = tape.clamp(alpha, ALPHA_FLOOR, 1.0);
    let la = tape.log(a);
    let z = match noise {
        Some(g) => {
            let g = tape.constant(Tensor::new(tape.shape(alpha).to_vec(), g.to_vec())?);
            tape.add(la, g)?
        }
        None => la,
    };
    tape.softmax(z, temperature)
}

/// Soft composition `[R·M, K]` codes × `[M·K, N]` books → `[R, N]`.
pub fn compose_soft(tape: &mut Tape, cfg: &CodecConfig, codes: Var, books: Var) -> Result<Var> {
    let rows = tape.shape(codes)[0] / cfg.m;
    let flat = tape.reshape(codes, &[rows, cfg.m * cfg.k])?;
    tape.matmul(flat, books)
}

/// `η x + (1 − η) e`.
pub fn mixup(tape: &mut Tape, e: Var, x: Var, eta: f64) -> Result<Var> {
    check_mixup(eta)?;
    let a = tape.scale(x, eta);
    let b = tape.scale(e, 1.0 - eta);
    tape.add(a, b)
}

/// `mean_v ‖e_v − x_v‖²`.
pub fn mse_loss(tape: &mut Tape, e: Var, x: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let d = tape.sub(e, x)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Full forward for a set of target rows; returns `(α, O, e)`.
pub fn forward(
    tape: &mut Tape,
    cfg: &CodecConfig,
    p: &CodecVars,
    x: Var,
    noise: Option<&[f64]>,
) -> Result<(Var, Var, Var)> {
    let alpha = code_probs(tape, cfg, p, x)?;
    let o = gumbel_softmax(tape, alpha, cfg.temperature, noise)?;
    let e = compose_soft(tape, cfg, o, p.books)?;
    Ok((alpha, o, e))
}

/// Hard code assignments, `codes[v·M + i] ∈ [0, K)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    pub num_items: usize,
    pub m: usize,
    pub k: usize,
    pub codes: Vec<u32>,
}

impl CodeMatrix {
    pub fn new(num_items: usize, m: usize, k: usize, codes: Vec<u32>) -> Result<Self> {
        if codes.len() != num_items * m {
            return Err(Error::dim("code matrix", &[codes.len()], &[num_items, m]));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Index { index: c as usize, bound: k });
        }
        Ok(CodeMatrix { num_items, m, k, codes })
    }

    pub fn item(&self, v: usize) -> &[u32] {
        &self.codes[v * self.m..(v + 1) * self.m]
    }
}

/// Argmax per group of `K`; ties go to the smallest index.
pub fn argmax_codes(alpha: &[f64], k: usize) -> Vec<u32> {
    alpha
        .chunks(k)
        .map(|g| {
            let mut best = 0;
            for (i, &v) in g.iter().enumerate() {
                if v > g[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Noise-free α for every row of `x`, evaluated without recording gradients.
pub fn alpha_table(cfg: &CodecConfig, params: &CodecParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let a = code_probs(&mut tape, cfg, &p, xv)?;
    Ok(tape.value(a).clone())
}

/// Hard codes `argmax_k α_v^i` for every item.
pub fn harden(cfg: &CodecConfig, params: &CodecParams, x: &Tensor) -> Result<CodeMatrix> {
    let alpha = alpha_table(cfg, params, x)?;
    CodeMatrix::new(x.rows(), cfg.m, cfg.k, argmax_codes(alpha.data(), cfg.k))
}

/// Hard composition for `indices`: row `r` is `Σ_i books[i·K + c_i]`, summed
/// left to right from zero. Output is `len(indices) × N`.
pub fn reconstruct_rows<F: Real>(
    codes: &CodeMatrix,
    books: &[F],
    dim: usize,
    indices: &[usize],
    out: &mut [F],
) -> Result<()> {
    if books.len() != codes.m * codes.k * dim || out.len() != indices.len() * dim {
        return Err(Error::dim(
            "reconstruct_rows",
            &[books.len(), out.len()],
            &[codes.m * codes.k * dim, indices.len() * dim],
        ));
    }
    for (r, &v) in indices.iter().enumerate() {
        if v >= codes.num_items {
            return Err(Error::Index { index: v, bound: codes.num_items });
        }
        let row = &mut out[r * dim..(r + 1) * dim];
        row.iter_mut().for_each(|x| *x = F::zero());
        for (i, &c) in codes.item(v).iter().enumerate() {
            let src = (i * codes.k + c as usize) * dim;
            for (o, &b) in row.iter_mut().zip(&books[src..src + dim]) {
                *o += b;
            }
        }
    }
    Ok(())
}

/// Full-table hard composition, `|V| × N`.
pub fn reconstruct_all<F: Real>(codes: &CodeMatrix, books: &[F], dim: usize, out: &mut [F]) -> Result<()> {
    let m = codes.m;
    let k = codes.k;
    if books.len() != m * k * dim || out.len() != codes.num_items * dim {
        return Err(Error::dim(
            "reconstruct_all",
            &[books.len(), out.len()],
            &[m * k * dim, codes.num_items * dim],
        ));
    }
    for (row, code) in out.chunks_exact_mut(dim).zip(codes.codes.chunks_exact(m)) {
        row.iter_mut().for_each(|x| *x = F::zero());
        for (i, &c) in code.iter().enumerate() {
            let src = (i * k + c as usize) * dim;
            for (o, &b) in row.iter_mut().zip(&books[src..src + dim]) {
                *o += b;
            }
        }
    }
    Ok(())
}

/// Parameter count and exact compression ratio `|V|·N / (MKN + M|V|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub original: u64,
    pub compressed: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.original as f64 / self.compressed as f64
    }

    /// Integer view, `⌊original / compressed⌋`.
    pub fn floor(self) -> u64 {
        self.original / self.compressed
    }

    /// Nearest-integer view, halves rounded up.
    pub fn nearest(self) -> u64 {
        (2 * self.original + self.compressed) / (2 * self.compressed)
    }
}

pub fn compression_ratio(num_items: u64, dim: u64, m: u64, k: u64) -> Result<Ratio> {
    if num_items == 0 || dim == 0 || m == 0 || k == 0 {
        return Err(Error::Parameter(
            "compression ratio needs positive |V|, N, M and K".into(),
        ));
    }
    Ok(Ratio {
        original: num_items * dim,
        compressed: m * k * dim + m * num_items,
    })
}

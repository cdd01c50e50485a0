//! One-block self-attention session encoder with soft-attention pooling.
//!
//! Forward pass for a left-padded batch of width `W`:
//!
//! ```text
//! h0 = dropout(X[items] + P[positions])            (pad rows zeroed)
//! a  = softmax(h0Wq (h0Wk)ᵀ / √d_head) h0Wv        (causal, pad-masked)
//! h1 = LN1(h0 + dropout(a Wo))
//! h2 = LN2(h1 + dropout(relu(h1 W1 + b1) W2 + b2))  (pad rows zeroed)
//! ```
//!
//! Session pooling over a position mask `m`:
//!
//! ```text
//! x*  = mean of h2 over positions where m holds
//! α_t = σ(x* W₁ + h2_t W₂ + c) · f                   (0 where m fails)
//! θ   = Σ_t α_t h2_t
//! ```
//!
//! Row vectors throughout: `x W` here is `Wᵀx` in column notation.

pub mod frozen;
mod model;

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tensor::{Tape, Tensor, Var};

pub use frozen::FrozenEncoder;
pub use model::RecModel;

pub const INIT_RANGE: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-8;

/// Which recommendation loss to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// `−Σ_v y_v log ŷ_v + (1 − y_v) log(1 − ŷ_v)` over softmax outputs.
    #[default]
    Binary,
    /// `−log ŷ_label`.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_items: usize,
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub dropout: f64,
    /// When false both layer norms are the identity (test harness only).
    pub layer_norm: bool,
    pub loss: RecLoss,
}

impl EncoderConfig {
    pub fn new(num_items: usize, dim: usize, max_len: usize) -> Self {
        EncoderConfig {
            num_items,
            dim,
            max_len,
            heads: 1,
            dropout: 0.2,
            layer_norm: true,
            loss: RecLoss::Binary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(Error::Parameter(
                "num_items, dim and max_len must be positive".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

param_group! {
    /// Everything in the encoder except the item table.
    pub struct EncoderParams => EncoderVars {
        pos,
        wq, wk, wv, wo,
        ln1_g, ln1_b,
        ff_w1, ff_b1, ff_w2, ff_b2,
        ln2_g, ln2_b,
        pool_w1, pool_w2, pool_c, pool_f,
    }
}

impl EncoderParams {
    /// U(−0.1, 0.1) everywhere except layer-norm gains (1) and biases (0).
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let n = cfg.dim;
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, rng);
        EncoderParams {
            pos: u(&[cfg.max_len, n]),
            wq: u(&[n, n]),
            wk: u(&[n, n]),
            wv: u(&[n, n]),
            wo: u(&[n, n]),
            ln1_g: Tensor::full(&[n], 1.0),
            ln1_b: Tensor::zeros(&[n]),
            ff_w1: u(&[n, n]),
            ff_b1: u(&[n]),
            ff_w2: u(&[n, n]),
            ff_b2: u(&[n]),
            ln2_g: Tensor::full(&[n], 1.0),
            ln2_b: Tensor::zeros(&[n]),
            pool_w1: u(&[n, n]),
            pool_w2: u(&[n, n]),
            pool_c: u(&[n]),
            pool_f: u(&[n]),
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let n = cfg.dim;
        let z = |shape: &[usize]| Tensor::zeros(shape);
        EncoderParams {
            pos: z(&[cfg.max_len, n]),
            wq: z(&[n, n]),
            wk: z(&[n, n]),
            wv: z(&[n, n]),
            wo: z(&[n, n]),
            ln1_g: Tensor::full(&[n], 1.0),
            ln1_b: z(&[n]),
            ff_w1: z(&[n, n]),
            ff_b1: z(&[n]),
            ff_w2: z(&[n, n]),
            ff_b2: z(&[n]),
            ln2_g: Tensor::full(&[n], 1.0),
            ln2_b: z(&[n]),
            pool_w1: z(&[n, n]),
            pool_w2: z(&[n, n]),
            pool_c: z(&[n]),
            pool_f: z(&[n]),
        }
    }
}

/// Per-row 0/1 multiplier of shape `[rows, cols]`.
fn row_mask(mask: &[bool], cols: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, cols))
        .collect();
    Tensor::new(vec![mask.len(), cols], data).expect("mask shape")
}

fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(x, rate, &mut **r),
        None => Ok(x),
    }
}

/// Causal, key-pad and query-pad mask of shape `[B, W, W]`.
pub fn attention_mask(valid: &[bool], batch: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; batch * width * width];
    for b in 0..batch {
        for i in 0..width {
            if !valid[b * width + i] {
                continue;
            }
            for j in 0..=i {
                mask[(b * width + i) * width + j] = valid[b * width + j];
            }
        }
    }
    mask
}

/// Encodes a batch; returns per-position representations `[B·W, N]`.
///
/// `table` is the `|V| × N` item embedding source. Passing `rng` enables
/// dropout (training); `None` is evaluation mode.
pub fn encode(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    p: &EncoderVars,
    table: Var,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (bsz, w, n) = (batch.size(), batch.width, cfg.dim);
    if w > cfg.max_len || batch.max_len != cfg.max_len {
        return Err(Error::Shape(format!(
            "batch width {w} (max_len {}) exceeds encoder max_len {}",
            batch.max_len, cfg.max_len
        )));
    }
    if tape.shape(table) != [cfg.num_items, n] {
        return Err(Error::dim("encode", tape.shape(table), &[cfg.num_items, n]));
    }
    let valid = batch.valid_mask();
    let item_idx: Vec<usize> = batch
        .items
        .iter()
        .map(|&i| if i == batch.pad { 0 } else { i as usize })
        .collect();
    let pos_idx: Vec<usize> = (0..bsz)
        .flat_map(|_| (0..w).map(|c| batch.position_of(c)))
        .collect();
    let keep = tape.constant(row_mask(&valid, n));

    let x = tape.gather_rows(table, &item_idx)?;
    let pos = tape.gather_rows(p.pos, &pos_idx)?;
    let h = tape.add(x, pos)?;
    let h = tape.mul(h, keep)?;
    let h0 = maybe_dropout(tape, h, cfg.dropout, &mut rng)?;

    // self-attention
    let q = tape.matmul(h0, p.wq)?;
    let k = tape.matmul(h0, p.wk)?;
    let v = tape.matmul(h0, p.wv)?;
    let mask = Rc::new(attention_mask(&valid, bsz, w));
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let part = |tape: &mut Tape, t: Var| -> Result<Var> {
            let s = if cfg.heads == 1 {
                t
            } else {
                tape.slice_last(t, hd * dh, (hd + 1) * dh)?
            };
            tape.reshape(s, &[bsz, w, dh])
        };
        let (qh, kh, vh) = (part(tape, q)?, part(tape, k)?, part(tape, v)?);
        let kt = tape.transpose(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.masked_softmax(scores, mask.clone())?;
        let out = tape.bmm(attn, vh)?;
        heads.push(tape.reshape(out, &[bsz * w, dh])?);
    }
    let a = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads)?
    };
    let a = tape.matmul(a, p.wo)?;
    let a = maybe_dropout(tape, a, cfg.dropout, &mut rng)?;
    let r1 = tape.add(h0, a)?;
    let h1 = if cfg.layer_norm {
        tape.layer_norm(r1, p.ln1_g, p.ln1_b, LN_EPS)?
    } else {
        r1
    };

    // feed-forward
    let f = tape.matmul(h1, p.ff_w1)?;
    let f = tape.add_row(f, p.ff_b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, p.ff_w2)?;
    let f = tape.add_row(f, p.ff_b2)?;
    let f = maybe_dropout(tape, f, cfg.dropout, &mut rng)?;
    let r2 = tape.add(h1, f)?;
    let h2 = if cfg.layer_norm {
        tape.layer_norm(r2, p.ln2_g, p.ln2_b, LN_EPS)?
    } else {
        r2
    };
    tape.mul(h2, keep)
}

/// Soft-attention pooling of `reps` (`[B·W, N]`) over the positions where
/// `mask` holds. Sessions with an empty mask pool to the zero vector when
/// `allow_empty`, and are a contract error otherwise. Returns `[B, N]`.
pub fn pool(
    tape: &mut Tape,
    p: &EncoderVars,
    reps: Var,
    batch_size: usize,
    width: usize,
    mask: &[bool],
    allow_empty: bool,
) -> Result<Var> {
    let n = tape.shape(reps)[1];
    if mask.len() != batch_size * width || tape.shape(reps)[0] != batch_size * width {
        return Err(Error::dim(
            "pool",
            tape.shape(reps),
            &[batch_size * width, mask.len()],
        ));
    }
    let mut mean_w = vec![0.0; batch_size * width * width];
    for b in 0..batch_size {
        let row = &mask[b * width..(b + 1) * width];
        let l = row.iter().filter(|&&m| m).count();
        if l == 0 {
            if !allow_empty {
                return Err(Error::Data(format!("session {b} in batch has no items to pool")));
            }
            continue;
        }
        for i in 0..width {
            for (j, &m) in row.iter().enumerate() {
                if m {
                    mean_w[(b * width + i) * width + j] = 1.0 / l as f64;
                }
            }
        }
    }
    let mean_w = tape.constant(Tensor::new(vec![batch_size, width, width], mean_w)?);
    let x3 = tape.reshape(reps, &[batch_size, width, n])?;
    let xstar = tape.bmm(mean_w, x3)?;
    let xstar = tape.reshape(xstar, &[batch_size * width, n])?;
    let a = tape.matmul(xstar, p.pool_w1)?;
    let b = tape.matmul(reps, p.pool_w2)?;
    let s = tape.add(a, b)?;
    let s = tape.add_row(s, p.pool_c)?;
    let s = tape.sigmoid(s);
    let f = tape.reshape(p.pool_f, &[n, 1])?;
    let alpha = tape.matmul(s, f)?;
    let m = tape.constant(row_mask(mask, 1));
    let alpha = tape.mul(alpha, m)?;
    let alpha = tape.reshape(alpha, &[batch_size, 1, width])?;
    let theta = tape.bmm(alpha, x3)?;
    tape.reshape(theta, &[batch_size, n])
}

/// `θ · tableᵀ`: `[B, N] × [|V|, N] -> [B, |V|]`.
pub fn logits(tape: &mut Tape, theta: Var, table: Var) -> Result<Var> {
    let t = tape.transpose(table)?;
    tape.matmul(theta, t)
}

/// Batch-mean recommendation loss from logits.
pub fn rec_loss(tape: &mut Tape, logits: Var, labels: &[usize], kind: RecLoss) -> Result<Var> {
    match kind {
        RecLoss::Categorical => tape.cross_entropy(logits, labels),
        RecLoss::Binary => {
            let s = tape.shape(logits).to_vec();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(Error::dim("rec_loss", &s, &[labels.len()]));
            }
            let (bsz, v) = (s[0], s[1]);
            let mut y = vec![0.0; bsz * v];
            for (b, &l) in labels.iter().enumerate() {
                if l >= v {
                    return Err(Error::Index { index: l, bound: v });
                }
                y[b * v + l] = 1.0;
            }
            let y1 = tape.constant(Tensor::new(vec![bsz, v], y.clone())?);
            let y0 = tape.constant(Tensor::new(
                vec![bsz, v],
                y.iter().map(|t| 1.0 - t).collect(),
            )?);
            let probs = tape.softmax(logits, 1.0)?;
            let pc = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let lp = tape.log(pc);
            let neg = tape.scale(pc, -1.0);
            let one_minus = tape.add_scalar(neg, 1.0);
            let lq = tape.log(one_minus);
            let t1 = tape.mul(y1, lp)?;
            let t0 = tape.mul(y0, lq)?;
            let total = tape.add(t1, t0)?;
            let total = tape.sum(total);
            Ok(tape.scale(total, -1.0 / bsz as f64))
        }
    }
}

/// Plain-slice evaluation of the binary loss for one probability row.
pub fn binary_rec_loss_row(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if v == label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

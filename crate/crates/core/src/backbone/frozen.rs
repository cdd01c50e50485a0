//! Inference-only encoder over plain slices, generic in the float width.

use super::{attention_mask, EncoderConfig, EncoderParams, LN_EPS};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul_nn, matmul_nt_acc, softmax_in_place};
use crate::tensor::{Real, Tensor};

/// A parameter snapshot converted to `F`; evaluation mode (no dropout).
#[derive(Clone, Debug)]
pub struct FrozenEncoder<F: Real> {
    pub cfg: EncoderConfig,
    pos: Vec<F>,
    wq: Vec<F>,
    wk: Vec<F>,
    wv: Vec<F>,
    wo: Vec<F>,
    ln1_g: Vec<F>,
    ln1_b: Vec<F>,
    ff_w1: Vec<F>,
    ff_b1: Vec<F>,
    ff_w2: Vec<F>,
    ff_b2: Vec<F>,
    ln2_g: Vec<F>,
    ln2_b: Vec<F>,
    pool_w1: Vec<F>,
    pool_w2: Vec<F>,
    pool_c: Vec<F>,
    pool_f: Vec<F>,
}

fn conv<F: Real>(t: &Tensor) -> Vec<F> {
    t.data().iter().map(|&v| F::from_f64(v)).collect()
}

fn add_bias<F: Real>(x: &mut [F], b: &[F]) {
    for row in x.chunks_mut(b.len()) {
        for (v, &c) in row.iter_mut().zip(b) {
            *v += c;
        }
    }
}

fn layer_norm<F: Real>(x: &mut [F], g: &[F], b: &[F]) {
    let n = g.len();
    let nf = F::from_f64(n as f64);
    for row in x.chunks_mut(n) {
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let inv = F::one() / (var + F::from_f64(LN_EPS)).sqrt();
        for j in 0..n {
            row[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> FrozenEncoder<F> {
    pub fn new(cfg: &EncoderConfig, p: &EncoderParams) -> Self {
        FrozenEncoder {
            cfg: cfg.clone(),
            pos: conv(&p.pos),
            wq: conv(&p.wq),
            wk: conv(&p.wk),
            wv: conv(&p.wv),
            wo: conv(&p.wo),
            ln1_g: conv(&p.ln1_g),
            ln1_b: conv(&p.ln1_b),
            ff_w1: conv(&p.ff_w1),
            ff_b1: conv(&p.ff_b1),
            ff_w2: conv(&p.ff_w2),
            ff_b2: conv(&p.ff_b2),
            ln2_g: conv(&p.ln2_g),
            ln2_b: conv(&p.ln2_b),
            pool_w1: conv(&p.pool_w1),
            pool_w2: conv(&p.pool_w2),
            pool_c: conv(&p.pool_c),
            pool_f: conv(&p.pool_f),
        }
    }

    /// Per-position representations `[B·W, N]` given a `|V| × N` table.
    pub fn encode(&self, table: &[F], batch: &Batch) -> Result<Vec<F>> {
        let (bsz, w, n) = (batch.size(), batch.width, self.cfg.dim);
        if w > self.cfg.max_len || batch.max_len != self.cfg.max_len {
            return Err(Error::Shape(format!(
                "batch width {w} exceeds encoder max_len {}",
                self.cfg.max_len
            )));
        }
        if table.len() != self.cfg.num_items * n {
            return Err(Error::dim(
                "frozen encode",
                &[table.len()],
                &[self.cfg.num_items * n],
            ));
        }
        let rows = bsz * w;
        let valid = batch.valid_mask();
        let mut h0 = vec![F::zero(); rows * n];
        for (r, &item) in batch.items.iter().enumerate() {
            if item == batch.pad {
                continue;
            }
            let i = item as usize;
            let pos = batch.position_of(r % w);
            for j in 0..n {
                h0[r * n + j] = table[i * n + j] + self.pos[pos * n + j];
            }
        }
        let mut q = vec![F::zero(); rows * n];
        let mut k = vec![F::zero(); rows * n];
        let mut v = vec![F::zero(); rows * n];
        matmul_nn(&h0, &self.wq, rows, n, n, &mut q);
        matmul_nn(&h0, &self.wk, rows, n, n, &mut k);
        matmul_nn(&h0, &self.wv, rows, n, n, &mut v);
        let mask = attention_mask(&valid, bsz, w);
        let dh = self.cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut a = vec![F::zero(); rows * n];
        let mut scores = vec![F::zero(); w];
        for b in 0..bsz {
            for hd in 0..self.cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..w {
                    let qi = (b * w + i) * n;
                    let mrow = &mask[(b * w + i) * w..(b * w + i + 1) * w];
                    if !mrow.iter().any(|&m| m) {
                        continue;
                    }
                    let mut max = F::neg_infinity();
                    for j in 0..w {
                        if mrow[j] {
                            let kj = (b * w + j) * n;
                            let s = crate::tensor::kernels::dot(
                                &q[qi + cols.start..qi + cols.end],
                                &k[kj + cols.start..kj + cols.end],
                            ) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut sum = F::zero();
                    for j in 0..w {
                        scores[j] = if mrow[j] { (scores[j] - max).exp() } else { F::zero() };
                        sum += scores[j];
                    }
                    for j in 0..w {
                        if mrow[j] {
                            let wgt = scores[j] / sum;
                            let vj = (b * w + j) * n;
                            for c in cols.clone() {
                                a[qi + c] += wgt * v[vj + c];
                            }
                        }
                    }
                }
            }
        }
        let mut h1 = vec![F::zero(); rows * n];
        matmul_nn(&a, &self.wo, rows, n, n, &mut h1);
        for (x, &y) in h1.iter_mut().zip(&h0) {
            *x += y;
        }
        if self.cfg.layer_norm {
            layer_norm(&mut h1, &self.ln1_g, &self.ln1_b);
        }
        let mut f = vec![F::zero(); rows * n];
        matmul_nn(&h1, &self.ff_w1, rows, n, n, &mut f);
        add_bias(&mut f, &self.ff_b1);
        f.iter_mut().for_each(|x| *x = x.max(F::zero()));
        let mut h2 = vec![F::zero(); rows * n];
        matmul_nn(&f, &self.ff_w2, rows, n, n, &mut h2);
        add_bias(&mut h2, &self.ff_b2);
        for (x, &y) in h2.iter_mut().zip(&h1) {
            *x += y;
        }
        if self.cfg.layer_norm {
            layer_norm(&mut h2, &self.ln2_g, &self.ln2_b);
        }
        for (row, &ok) in h2.chunks_mut(n).zip(&valid) {
            if !ok {
                row.iter_mut().for_each(|x| *x = F::zero());
            }
        }
        Ok(h2)
    }

    /// Soft-attention pooling over the positions where `mask` holds; `[B, N]`.
    pub fn pool(&self, reps: &[F], batch_size: usize, width: usize, mask: &[bool]) -> Vec<F> {
        let n = self.cfg.dim;
        let mut theta = vec![F::zero(); batch_size * n];
        let mut mean = vec![F::zero(); n];
        let mut proj = vec![F::zero(); n];
        let mut z = vec![F::zero(); n];
        for b in 0..batch_size {
            let rows = b * width..(b + 1) * width;
            let l = mask[rows.clone()].iter().filter(|&&m| m).count();
            if l == 0 {
                continue;
            }
            mean.iter_mut().for_each(|x| *x = F::zero());
            for r in rows.clone().filter(|&r| mask[r]) {
                for j in 0..n {
                    mean[j] += reps[r * n + j];
                }
            }
            let lf = F::from_f64(l as f64);
            mean.iter_mut().for_each(|x| *x = *x / lf);
            matmul_nn(&mean, &self.pool_w1, 1, n, n, &mut proj);
            for r in rows.filter(|&r| mask[r]) {
                let x = &reps[r * n..(r + 1) * n];
                matmul_nn(x, &self.pool_w2, 1, n, n, &mut z);
                let mut alpha = F::zero();
                for j in 0..n {
                    alpha += sigmoid(proj[j] + z[j] + self.pool_c[j]) * self.pool_f[j];
                }
                for j in 0..n {
                    theta[b * n + j] += alpha * x[j];
                }
            }
        }
        theta
    }

    /// Session representations pooled over every item of each session.
    pub fn session_reps(&self, table: &[F], batch: &Batch) -> Result<Vec<F>> {
        let reps = self.encode(table, batch)?;
        Ok(self.pool(&reps, batch.size(), batch.width, &batch.valid_mask()))
    }
}

/// `theta (B×N) · tableᵀ` into `B × |V|` logits.
pub fn score_logits<F: Real>(theta: &[F], table: &[F], dim: usize) -> Vec<F> {
    let (b, v) = (theta.len() / dim, table.len() / dim);
    let mut out = vec![F::zero(); b * v];
    matmul_nt_acc(theta, table, b, dim, v, &mut out);
    out
}

/// Row-wise softmax of logits into probabilities.
pub fn probabilities<F: Real>(mut logits: Vec<F>, num_items: usize) -> Vec<F> {
    for row in logits.chunks_mut(num_items) {
        softmax_in_place(row, F::one());
    }
    logits
}

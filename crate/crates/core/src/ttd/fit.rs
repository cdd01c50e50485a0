//! Fitting TT/STTD cores to an existing table by gradient descent.
//!
//! During fitting each core is stored with `i_k` outermost so a mini-batch
//! slices it with a row gather:
//!
//! * first: `[I_1, J_1·R]`
//! * middle: `[I_k, (R/n)·(J_k/n)·R]`, entry `(i, h, j'·R + r)`
//! * last: `[I_d, (R/n)·(J_d/n)]`, entry `(i, h, j')`

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cores, TTConfig};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of Adam steps; 0 returns the initial cores.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 2000,
            batch_size: 256,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: usize,
}

fn gather_shapes(cfg: &TTConfig) -> Vec<[usize; 2]> {
    let (d, r, n) = (cfg.d(), cfg.rank, cfg.n);
    (0..d)
        .map(|k| {
            let (ik, jk) = (cfg.i_dims[k], cfg.j_dims[k]);
            if d == 1 {
                [ik, jk]
            } else if k == 0 {
                [ik, jk * r]
            } else if k + 1 < d {
                [ik, (r / n) * (jk / n) * r]
            } else {
                [ik, (r / n) * (jk / n)]
            }
        })
        .collect()
}

/// Batched reconstruction of `rows` on the tape: `[rows.len(), N]`.
fn forward(tape: &mut Tape, cfg: &TTConfig, cores: &[Var], rows: &[usize]) -> Result<Var> {
    let (d, r, n) = (cfg.d(), cfg.rank, cfg.n);
    let b = rows.len();
    let digit = |k: usize| -> Vec<usize> {
        let inner: usize = cfg.i_dims[k + 1..].iter().product();
        rows.iter().map(|&i| (i / inner) % cfg.i_dims[k]).collect()
    };
    let first = tape.gather_rows(cores[0], &digit(0))?;
    if d == 1 {
        return Ok(first);
    }
    let p = r / n;
    let mut h = cfg.j_dims[0];
    let mut a = tape.reshape(first, &[b, h, r])?;
    for k in 1..d {
        let jk = cfg.j_dims[k];
        let jn = jk / n;
        let g = tape.gather_rows(cores[k], &digit(k))?;
        if k + 1 < d {
            let g = tape.reshape(g, &[b, p, jn * r])?;
            let s = tape.stp(a, g, n)?;
            let s = tape.reshape(s, &[b * h * jn, r, n])?;
            let s = tape.transpose(s)?;
            h *= jk;
            a = tape.reshape(s, &[b, h, r])?;
        } else {
            let g = tape.reshape(g, &[b, p, jn])?;
            let s = tape.stp(a, g, n)?;
            return tape.reshape(s, &[b, h * jk]);
        }
    }
    unreachable!("d > 1 always reaches the last core")
}

fn batch_loss(tape: &mut Tape, cfg: &TTConfig, cores: &[Var], x: &Tensor, rows: &[usize]) -> Result<Var> {
    let e = forward(tape, cfg, cores, rows)?;
    let data: Vec<f64> = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    let t = tape.constant(Tensor::new(vec![rows.len(), x.cols()], data)?);
    let diff = tape.sub(e, t)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum_last(sq);
    Ok(tape.mean(per_row))
}

fn to_cores(cfg: &TTConfig, fit: &[Tensor]) -> Result<Cores<f64>> {
    let (d, r, n) = (cfg.d(), cfg.rank, cfg.n);
    let mut out = Vec::with_capacity(d);
    for (k, t) in fit.iter().enumerate() {
        let (ik, jk) = (cfg.i_dims[k], cfg.j_dims[k]);
        if d == 1 || k == 0 {
            out.push(t.data().to_vec());
            continue;
        }
        let (p, jn) = (r / n, jk / n);
        let width = if k + 1 < d { r } else { 1 };
        let mut core = vec![0.0; p * ik * jn * width];
        let src = t.data();
        for i in 0..ik {
            for h in 0..p {
                for jp in 0..jn {
                    for ro in 0..width {
                        core[((h * ik + i) * jn + jp) * width + ro] =
                            src[((i * p + h) * jn + jp) * width + ro];
                    }
                }
            }
        }
        out.push(core);
    }
    Cores::new(cfg.clone(), out)
}

/// Mean squared row error of the frozen cores against `x`.
pub fn table_mse(cores: &Cores<f64>, x: &Tensor) -> Result<f64> {
    let dim = x.cols();
    let mut ws = super::Workspace::default();
    let mut row = vec![0.0; dim];
    let mut total = 0.0;
    for i in 0..x.rows() {
        cores.gather_row(i, &mut ws, &mut row)?;
        total += row.iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / x.rows().max(1) as f64)
}

/// Fits cores so that the first `x.rows()` reconstructed rows match `x`.
pub fn fit_cores(x: &Tensor, cfg: &TTConfig, fc: &FitConfig) -> Result<(Cores<f64>, FitReport)> {
    if x.rank() != 2 {
        return Err(Error::dim("fit_cores", x.shape(), &[x.rows(), cfg.dim()]));
    }
    cfg.validate(x.rows(), x.cols())?;
    if fc.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    // pick the init range so the initial output matches the target scale
    let d = cfg.d() as i32;
    let terms = ((cfg.rank / cfg.n) as f64).powi(d - 1);
    let target_var = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel().max(1) as f64;
    let target_var = if target_var > 0.0 { target_var } else { 1e-2 };
    let s = 3f64.sqrt() * (target_var / terms).powf(0.5 / d as f64);
    let mut params: Vec<Tensor> = gather_shapes(cfg)
        .iter()
        .map(|sh| Tensor::uniform(sh, -s, s, &mut rng))
        .collect();

    let all: Vec<usize> = (0..x.rows()).collect();
    let full_mse = |params: &[Tensor]| -> Result<f64> { table_mse(&to_cores(cfg, params)?, x) };
    let initial_mse = full_mse(&params)?;
    let mut adam = Adam::new(AdamConfig { lr: fc.lr, ..AdamConfig::default() });
    let mut order = all.clone();
    let mut cursor = order.len();
    let mut tape = Tape::new();
    for _ in 0..fc.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + fc.batch_size).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        tape.reset();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = batch_loss(&mut tape, cfg, &vars, x, rows)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("TT fitting loss".into()));
        }
        let grads = tape.backward(loss)?;
        crate::params::adam_update(&mut adam, params.iter_mut().collect(), &vars, &grads)?;
    }
    let final_mse = full_mse(&params)?;
    Ok((
        to_cores(cfg, &params)?,
        FitReport { initial_mse, final_mse, steps: fc.steps },
    ))
}

//! Standalone code learning against a fixed target table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, gumbel_noise, mse_loss, CodecConfig, CodecParams};
use crate::error::{Error, Result};
use crate::params::{adam_update, ParamGroup};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

/// Seed offset for the evaluation noise stream, kept apart from training draws.
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Gumbel noise during training (and in the reported objective).
    pub noise: bool,
}

impl Default for CodeTrainConfig {
    fn default() -> Self {
        CodeTrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            noise: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeTrainReport {
    /// Full-table objective before any update.
    pub initial_mse: f64,
    /// Mean mini-batch objective of every epoch.
    pub epoch_mse: Vec<f64>,
    /// Full-table objective after the last epoch.
    pub final_mse: f64,
}

/// `L_mse` over the whole table. With `noise_seed` the Gumbel draws come from
/// that seed, otherwise the noise-free codes are used.
pub fn table_mse(
    cfg: &CodecConfig,
    params: &CodecParams,
    x: &Tensor,
    noise_seed: Option<u64>,
) -> Result<f64> {
    let noise = noise_seed
        .map(|s| gumbel_noise(x.rows() * cfg.m * cfg.k, &mut ChaCha8Rng::seed_from_u64(s)));
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (_, _, e) = forward(&mut tape, cfg, &p, xv, noise.as_deref())?;
    let l = mse_loss(&mut tape, e, xv)?;
    Ok(tape.value(l).item())
}

/// Fits codes and codebooks to `x` by minimizing `L_mse` with Adam.
pub fn train_codes(
    x: &Tensor,
    cfg: &CodecConfig,
    tc: &CodeTrainConfig,
    params: &mut CodecParams,
) -> Result<CodeTrainReport> {
    cfg.validate()?;
    if tc.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    if x.rank() != 2 || x.cols() != cfg.dim {
        return Err(Error::dim("train_codes", x.shape(), &[x.rows(), cfg.dim]));
    }
    let eval_seed = tc.noise.then_some(tc.seed ^ EVAL_STREAM);
    let initial_mse = table_mse(cfg, params, x, eval_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    });
    let n = cfg.dim;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut epoch_mse = Vec::with_capacity(tc.epochs);
    let mut tape = Tape::new();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size) {
            let rows: Vec<f64> = chunk.iter().flat_map(|&v| x.row(v).iter().copied()).collect();
            let noise = tc
                .noise
                .then(|| gumbel_noise(chunk.len() * cfg.m * cfg.k, &mut rng));
            tape.reset();
            let p = params.bind(&mut tape, true);
            let xb = tape.constant(Tensor::new(vec![chunk.len(), n], rows)?);
            let (_, _, e) = forward(&mut tape, cfg, &p, xb, noise.as_deref())?;
            let loss = mse_loss(&mut tape, e, xb)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("L_mse during code learning".into()));
            }
            total += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            adam_update(&mut adam, params.tensors_mut(), &p.vars(), &grads)?;
        }
        epoch_mse.push(total / batches as f64);
    }
    let final_mse = table_mse(cfg, params, x, eval_seed)?;
    Ok(CodeTrainReport {
        initial_mse,
        epoch_mse,
        final_mse,
    })
}

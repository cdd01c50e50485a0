//! Fits plain TT and STTD cores to an embedding table and compares row
//! reconstructions, error and size.
//!
//! cargo run --release --example sttd_reconstruction -- [steps]

use compact_rec::tensor::Tensor;
use compact_rec::ttd::{fit_cores, index_factorize, sttd_gather_row, sttd_rate, FitConfig, RateFormula, TTConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let (v, n) = (1000, 32);
    // a low-rank target plus a little noise, so both formats have something to find
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = Tensor::uniform(&[v, 4], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[4, n], -0.2, 0.2, &mut rng);
    let noise = Tensor::uniform(&[v, n], -0.01, 0.01, &mut rng);
    let mut x = Tensor::zeros(&[v, n]);
    for i in 0..v {
        for j in 0..n {
            let s: f64 = (0..4).map(|r| u.row(i)[r] * w.row(r)[j]).sum();
            x.data_mut()[i * n + j] = s + noise.row(i)[j];
        }
    }

    // mean squared row norm: the error of predicting all zeros
    let energy = x.data().iter().map(|v| v * v).sum::<f64>() / v as f64;
    let fit = FitConfig { steps, lr: 1e-2, ..FitConfig::default() };
    for block in [1, 2] {
        let cfg = TTConfig::balanced(v, n, 3, 8, block)?;
        let (cores, report) = fit_cores(&x, &cfg, &fit)?;
        println!(
            "n={block}: I={:?} J={:?} R={} params {} (dense {}), rate {:.2}, relative error {:.3} -> {:.3}",
            cfg.i_dims,
            cfg.j_dims,
            cfg.rank,
            cfg.num_params(),
            v * n,
            sttd_rate(&cfg, RateFormula::Corrected),
            report.initial_mse / energy,
            report.final_mse / energy
        );
        let item = 417;
        let row = sttd_gather_row(item, &cores)?;
        println!(
            "  item {item} -> digits {:?}; first entries {:?} vs target {:?}",
            index_factorize(item, &cfg.i_dims)?,
            &row[..4].iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>(),
            &x.row(item)[..4].iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    }
    Ok(())
}

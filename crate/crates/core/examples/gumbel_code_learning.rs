//! Learns compositional codes for a random embedding table and reports how
//! far the reconstruction error drops.
//!
//! cargo run --release --example gumbel_code_learning -- [epochs] [batch] [lr]

use compact_rec::codec::{self, train_codes, CodeTrainConfig, CodecConfig, CodecParams};
use compact_rec::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (num_items, dim) = (1000, 32);
    let cfg = CodecConfig::new(8, 64, dim);
    let tc = CodeTrainConfig {
        epochs: arg(0, 200.0) as usize,
        batch_size: arg(1, 32.0) as usize,
        lr: arg(2, 1e-3),
        seed: 17,
        ..CodeTrainConfig::default()
    };
    let x = Tensor::uniform(&[num_items, dim], -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(11));
    let mut params = CodecParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(12));

    let started = std::time::Instant::now();
    let report = train_codes(&x, &cfg, &tc, &mut params)?;
    for (e, l) in report.epoch_mse.iter().enumerate() {
        if e % 20 == 0 || e + 1 == report.epoch_mse.len() {
            println!("epoch {:>4}  batch L_mse {l:.5}", e + 1);
        }
    }
    println!(
        "L_mse {:.5} -> {:.5} ({:.3}x) in {:.1}s",
        report.initial_mse,
        report.final_mse,
        report.final_mse / report.initial_mse,
        started.elapsed().as_secs_f64()
    );

    let codes = codec::harden(&cfg, &params, &x)?;
    let packed = codec::PackedCodes::new(codes, &params.books)?;
    let hard = packed.reconstruct_all();
    let hard_mse: f64 = hard
        .chunks(dim)
        .zip(x.data().chunks(dim))
        .map(|(e, t)| e.iter().zip(t).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / num_items as f64;
    println!("hard-code L_mse {hard_mse:.5}");
    Ok(())
}

//! Scoring-pass latency of dense, compositional, TT and STTD embeddings at a
//! 40,728-item scale.
//!
//! cargo run --release --example latency_bench -- [fit_steps] [reps]

use compact_rec::backbone::{EncoderConfig, EncoderParams, FrozenEncoder};
use compact_rec::codec::{self, CodecConfig, CodecParams, PackedCodes};
use compact_rec::eval::bench::{bench_reconstruction, BenchConfig, EmbeddingSource, Workload};
use compact_rec::tensor::Tensor;
use compact_rec::ttd::{fit_cores, Cores, FitConfig, TTConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(50);
    let reps = args.get(1).copied().unwrap_or(5);
    let (v, n, max_len) = (40_728, 128, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let x = Tensor::uniform(&[v, n], -0.1, 0.1, &mut rng);
    let enc_cfg = EncoderConfig::new(v, n, max_len);
    let enc = FrozenEncoder::<f32>::new(&enc_cfg, &EncoderParams::init(&enc_cfg, &mut rng));

    let codec_cfg = CodecConfig::new(4, 32, n);
    let params = CodecParams::init(&codec_cfg, &mut rng);
    let packed = PackedCodes::new(codec::harden(&codec_cfg, &params, &x)?, &params.books)?;

    let fit = FitConfig { steps, batch_size: 256, lr: 5e-3, seed: 1 };
    let sttd_cfg = TTConfig { i_dims: vec![34, 35, 35], j_dims: vec![4, 4, 8], rank: 64, n: 2 };
    let tt_cfg = TTConfig { n: 1, ..sttd_cfg.clone() };
    let started = std::time::Instant::now();
    let (sttd, sttd_fit) = fit_cores(&x, &sttd_cfg, &fit)?;
    let (tt, tt_fit) = fit_cores(&x, &tt_cfg, &fit)?;
    println!(
        "fit {steps} steps in {:.1}s: sttd mse {:.5} -> {:.5}, tt mse {:.5} -> {:.5}",
        started.elapsed().as_secs_f64(),
        sttd_fit.initial_mse,
        sttd_fit.final_mse,
        tt_fit.initial_mse,
        tt_fit.final_mse
    );
    let to_f32 = |c: &Cores<f64>| -> compact_rec::Result<Cores<f32>> {
        Cores::new(c.config.clone(), c.cores.iter().map(|k| k.iter().map(|&v| v as f32).collect()).collect())
    };

    let sources = vec![
        EmbeddingSource::Dense(x.to_f32()),
        EmbeddingSource::Codec(packed),
        EmbeddingSource::Tt(to_f32(&tt)?),
        EmbeddingSource::Sttd(to_f32(&sttd)?),
    ];
    let workload = Workload::generate(v, 100, max_len, 9);
    let report = bench_reconstruction(
        &sources,
        &enc,
        &workload,
        &vec![false; v],
        &BenchConfig { warmups: 2, reps },
    )?;
    print!("{}", report.table());
    println!(
        "codec speedup over sttd: {:.2}x, over tt: {:.2}x",
        report.speedup("codec", "sttd").unwrap_or(f64::NAN),
        report.speedup("codec", "tt").unwrap_or(f64::NAN)
    );
    Ok(())
}

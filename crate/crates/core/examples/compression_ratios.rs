//! Codebook and tensor-train compression ratios side by side.
//!
//! cargo run --example compression_ratios

use compact_rec::codec::compression_ratio;
use compact_rec::eval::ratios::{check_ratios, ratio_table};
use compact_rec::ttd::{sttd_rate, RateFormula, TTConfig};

fn main() -> compact_rec::Result<()> {
    print!("{}", ratio_table(&check_ratios()?));

    let (v, n) = (40_728u64, 128u64);
    println!("\n|V| = {v}, N = {n}");
    for (m, k) in [(2, 32), (4, 32), (8, 32), (4, 256)] {
        let r = compression_ratio(v, n, m, k)?;
        println!("codec M={m} K={k:<4} params {:>8}  ratio {:>7.2}  bound N/M = {}", r.compressed, r.value(), n / m);
    }
    for (rank, block) in [(64, 1), (64, 2), (64, 4), (32, 2)] {
        let cfg = TTConfig { rank, n: block, ..TTConfig::balanced(v as usize, n as usize, 3, rank, block)? };
        println!(
            "tt I={:?} J={:?} R={rank:<3} n={block} params {:>8}  ratio {:>7.2} (printed-sum rate {:.2})",
            cfg.i_dims,
            cfg.j_dims,
            cfg.num_params(),
            sttd_rate(&cfg, RateFormula::Corrected),
            sttd_rate(&cfg, RateFormula::Printed),
        );
    }
    Ok(())
}

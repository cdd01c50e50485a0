//! Stores hard codes and codebooks in the packed binary format, reloads them
//! and checks the reconstruction and the byte accounting.
//!
//! cargo run --example packed_codes

use compact_rec::codec::{CodeMatrix, PackedCodes};
use compact_rec::eval::{code_usage_histogram, histogram_csv, memory_footprint};
use compact_rec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let (v, m, k, n) = (5000, 4, 32, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codes: Vec<u32> = (0..v * m).map(|_| rng.random_range(0..k as u32)).collect();
    let books = Tensor::uniform(&[m * k, n], -0.1, 0.1, &mut rng);
    let packed = PackedCodes::new(CodeMatrix::new(v, m, k, codes)?, &books)?;

    let dir = std::env::temp_dir().join("compact-rec-packed-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("codes.ccec");
    packed.save(&path)?;
    let back = PackedCodes::load(&path)?;
    println!("round trip equal: {}", back == packed);
    println!("reconstruction equal: {}", back.reconstruct_all() == packed.reconstruct_all());
    println!("{}", serde_json::to_string_pretty(&back.inspect_json()["header"])?);

    let report = memory_footprint(&path, 0, None)?;
    for c in &report.components {
        println!("{:<8} params {:>8}  formula bytes {:>8}  file bytes {:?}", c.name, c.params, c.formula_bytes, c.file_bytes);
    }
    println!("ratio {:.2} (floor {}), byte ratio {:.2}", report.codec_ratio, report.codec_ratio_floor, report.codec_byte_ratio);

    let hist = code_usage_histogram(&back.codes);
    print!("{}", histogram_csv(&hist[..1]).lines().take(6).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok(())
}

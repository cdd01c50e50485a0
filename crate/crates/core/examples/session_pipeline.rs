//! End-to-end run on a synthetic corpus: teacher training, popularity
//! baseline, then distillation into a compositional-code student.
//!
//! cargo run --release --example session_pipeline -- [teacher_epochs] [joint_epochs]

use compact_rec::backbone::{EncoderConfig, RecModel};
use compact_rec::codec::CodecConfig;
use compact_rec::data::{build_dataset, gen_synthetic, DEFAULT_MAX_LEN};
use compact_rec::distill::{distill, train_teacher, DistillConfig, Student, TrainConfig};
use compact_rec::eval::popularity_baseline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let teacher_epochs = args.first().copied().unwrap_or(30);
    let joint_epochs = args.get(1).copied().unwrap_or(10);
    let seed = 7;

    let ds = build_dataset(&gen_synthetic(200, 2000, seed)?, seed, DEFAULT_MAX_LEN)?;
    println!("{}", serde_json::to_string(&ds.stats())?);

    let cfg = EncoderConfig::new(ds.num_items(), 32, ds.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = RecModel::init(&cfg, &mut rng)?;
    let tc = TrainConfig { epochs: teacher_epochs, seed, ..TrainConfig::default() };
    let started = std::time::Instant::now();
    let out = train_teacher(&ds, &mut teacher, &tc, &mut |l| {
        println!("{}", serde_json::to_string(l).expect("log line"))
    })?;
    let pop = popularity_baseline(&ds, &ds.test);
    println!(
        "teacher test P@10 {:.2} NDCG@10 {:.2} | popularity P@10 {:.2} ({:.1}s)",
        out.test.p10,
        out.test.ndcg10,
        pop.p10,
        started.elapsed().as_secs_f64()
    );

    let student = Student::init(&cfg, &CodecConfig::new(4, 32, 32), &mut rng)?;
    let dc = DistillConfig { joint_epochs, ..DistillConfig::default() };
    let started = std::time::Instant::now();
    let out = distill(&ds, &mut teacher, student, &dc, &tc, &mut |l| {
        println!("{}", serde_json::to_string(l).expect("log line"))
    })?;
    println!(
        "student test P@10 {:.2} NDCG@10 {:.2}, best epoch {} ({:.1}s)",
        out.test.p10,
        out.test.ndcg10,
        out.best_epoch,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

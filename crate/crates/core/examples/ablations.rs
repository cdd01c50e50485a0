//! Runs the five distillation variants against one teacher and prints the
//! student's test metrics and final loss terms for each.
//!
//! cargo run --release --example ablations -- [teacher_epochs] [joint_epochs]

use compact_rec::backbone::{EncoderConfig, RecModel};
use compact_rec::codec::CodecConfig;
use compact_rec::data::{build_dataset, gen_synthetic, DEFAULT_MAX_LEN};
use compact_rec::distill::{distill, train_teacher, Ablation, DistillConfig, Student, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> compact_rec::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let teacher_epochs = args.first().copied().unwrap_or(10);
    let joint_epochs = args.get(1).copied().unwrap_or(3);
    let seed = 7;
    let ds = build_dataset(&gen_synthetic(200, 2000, seed)?, seed, DEFAULT_MAX_LEN)?;
    let cfg = EncoderConfig::new(ds.num_items(), 32, ds.max_len);
    let tc = TrainConfig { epochs: teacher_epochs, seed, ..TrainConfig::default() };
    let mut teacher = RecModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let t = train_teacher(&ds, &mut teacher, &tc, &mut |_| {})?;
    println!("teacher test P@10 {:.2} NDCG@10 {:.2}", t.test.p10, t.test.ndcg10);

    println!("{:<10} {:>7} {:>8} {:>9} {:>9} {:>9} {:>9}", "variant", "P@10", "NDCG@10", "L_rec_stu", "L_mse", "L_con", "L_soft");
    for ablation in Ablation::ALL {
        let mut dc = DistillConfig { pretrain_epochs: 1, joint_epochs, ..DistillConfig::default() };
        ablation.apply(&mut dc);
        let student = Student::init(&cfg, &CodecConfig::new(4, 32, 32), &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
        let mut tea = teacher.clone();
        let out = distill(&ds, &mut tea, student, &dc, &tc, &mut |_| {})?;
        let last = out.logs.last().expect("at least one epoch");
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<10} {:>7.2} {:>8.2} {:>9} {:>9} {:>9} {:>9}",
            ablation.name(),
            out.test.p10,
            out.test.ndcg10,
            f(last.rec_stu),
            f(last.mse),
            f(last.con),
            f(last.soft)
        );
    }
    Ok(())
}

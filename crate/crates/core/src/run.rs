//! The command-line workflows, one function per subcommand. Each writes its
//! resolved configuration next to its outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{FrozenEncoder, RecModel};
use crate::codec::PackedCodes;
use crate::config::RunConfig;
use crate::data::{build_dataset, cache, gen_synthetic, EventLog, SessionDataset};
use crate::distill::{self, EpochLog, Student};
use crate::error::{Error, Result};
use crate::eval::bench::{bench_reconstruction, EmbeddingSource, Workload};
use crate::eval::ratios::{check_ratios, ratio_table};
use crate::eval::{self, code_usage_histogram, histogram_csv, memory_footprint, popularity_baseline};
use crate::params::ParamGroup;
use crate::ttd::{self, fit_cores, Cores};

pub const TEACHER_LOG: &str = "teacher_log.jsonl";
pub const TEACHER_REPORT: &str = "teacher_report.json";
pub const DISTILL_LOG: &str = "distill_log.jsonl";
pub const DISTILL_REPORT: &str = "distill_report.json";
/// Teacher weights after bidirectional training; never overwrites the input.
pub const JOINT_TEACHER: &str = "teacher_joint";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn log_writer(path: &Path) -> Result<impl FnMut(&EpochLog)> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    Ok(move |log: &EpochLog| {
        let line = serde_json::to_string(log).expect("epoch log serializes");
        println!("{line}");
        let _ = writeln!(file, "{line}");
        let _ = file.flush();
    })
}

/// Builds the dataset cache from an event log or the synthetic generator.
pub fn prepare(cfg: &RunConfig) -> Result<SessionDataset> {
    let log = match (&cfg.data, cfg.synthetic) {
        (_, true) => gen_synthetic(cfg.items, cfg.sessions, cfg.seed)?,
        (Some(path), false) => EventLog::read(path)?,
        (None, false) => {
            return Err(Error::Config(
                "prepare needs --data <events.tsv> or --synthetic".into(),
            ))
        }
    };
    let ds = build_dataset(&log, cfg.seed, cfg.max_len)?;
    cache::save(&ds, &cfg.out)?;
    cfg.write_resolved()?;
    println!("{}", serde_json::to_string_pretty(&ds.stats())?);
    Ok(ds)
}

#[derive(Clone, Debug, Serialize)]
pub struct TeacherReport {
    pub best_epoch: usize,
    pub valid: eval::RankingReport,
    pub test: eval::RankingReport,
    pub popularity_test: eval::RankingReport,
}

pub fn train_teacher(cfg: &RunConfig) -> Result<TeacherReport> {
    let ds = cache::load(&cfg.data_dir())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RecModel::init(&cfg.encoder(ds.num_items()), &mut rng)?;
    fs::create_dir_all(&cfg.out)?;
    let mut log = log_writer(&cfg.out.join(TEACHER_LOG))?;
    let out = distill::train_teacher(&ds, &mut model, &cfg.train(), &mut log)?;
    model.save(&cfg.teacher_path())?;
    let report = TeacherReport {
        best_epoch: out.best_epoch,
        valid: out.valid,
        test: out.test,
        popularity_test: popularity_baseline(&ds, &ds.test),
    };
    write_json(&cfg.out.join(TEACHER_REPORT), &report)?;
    cfg.write_resolved()?;
    println!(
        "teacher test P@10 {:.2} NDCG@10 {:.2}; popularity P@10 {:.2}",
        report.test.p10, report.test.ndcg10, report.popularity_test.p10
    );
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillReport {
    pub best_epoch: usize,
    pub valid: eval::RankingReport,
    pub test: eval::RankingReport,
    pub teacher_updated: bool,
}

pub fn distill(cfg: &RunConfig) -> Result<DistillReport> {
    let mut cfg = cfg.clone();
    cfg.apply_ablation();
    let ds = cache::load(&cfg.data_dir())?;
    let mut teacher = RecModel::load(&cfg.teacher_path())?;
    if teacher.cfg.num_items != ds.num_items() {
        return Err(Error::Config(format!(
            "teacher has {} items but the dataset has {}",
            teacher.cfg.num_items,
            ds.num_items()
        )));
    }
    let dc = cfg.distill();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student = Student::init(&teacher.cfg, &cfg.codec(), &mut rng)?;
    fs::create_dir_all(&cfg.out)?;
    let mut log = log_writer(&cfg.out.join(DISTILL_LOG))?;
    let out = distill::distill(&ds, &mut teacher, student, &dc, &cfg.train(), &mut log)?;
    out.student.save(&cfg.student_path())?;
    out.packed.save(&cfg.codes_path())?;
    if dc.bidirectional {
        teacher.save(&cfg.out.join(JOINT_TEACHER))?;
    }
    let report = DistillReport {
        best_epoch: out.best_epoch,
        valid: out.valid,
        test: out.test,
        teacher_updated: dc.bidirectional,
    };
    write_json(&cfg.out.join(DISTILL_REPORT), &report)?;
    cfg.write_resolved()?;
    println!(
        "student test P@10 {:.2} NDCG@10 {:.2} (best epoch {})",
        report.test.p10, report.test.ndcg10, report.best_epoch
    );
    Ok(report)
}

/// Test-split metrics of the teacher checkpoint, or of the student encoder
/// over the deployed code file.
pub fn evaluate(cfg: &RunConfig) -> Result<eval::RankingReport> {
    let ds = cache::load(&cfg.data_dir())?;
    let hot = &ds.vocab.hot;
    let report = match cfg.model.as_str() {
        "teacher" => distill::evaluate_teacher(&RecModel::load(&cfg.teacher_path())?, &ds.test, hot)?,
        "student" => {
            let student = Student::load(&cfg.student_path())?;
            let codes = load_codes(&cfg.codes_path())?;
            let enc = FrozenEncoder::<f32>::new(&student.cfg, &student.enc);
            eval::evaluate(&enc, &codes.reconstruct_all(), &ds.test, hot)?
        }
        other => {
            return Err(Error::Config(format!(
                "model must be teacher or student, got {other:?}"
            )))
        }
    };
    write_json(&cfg.out.join(format!("eval_{}.json", cfg.model)), &report)?;
    cfg.write_resolved()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}

fn load_codes(path: &Path) -> Result<PackedCodes> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    PackedCodes::load(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchOutcome {
    pub latency: eval::LatencyReport,
    pub memory: eval::MemoryReport,
}

/// Latency of every requested method on the teacher's encoder, plus the
/// memory report of the deployed code file.
pub fn bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    let teacher = RecModel::load(&cfg.teacher_path())?;
    let ds = cache::load(&cfg.data_dir())?;
    let v = teacher.cfg.num_items;
    let codes_path = cfg.codes_path();
    let mut sources = Vec::new();
    for method in &cfg.methods {
        let source = match method.as_str() {
            "dense" => EmbeddingSource::Dense(teacher.table.to_f32()),
            "codec" => EmbeddingSource::Codec(load_codes(&codes_path)?),
            "tt" | "sttd" => {
                let block = if method == "tt" { 1 } else { cfg.tt_n };
                let tt = cfg.tt(v, block)?;
                let (cores, fit) = fit_cores(&teacher.table, &tt, &cfg.fit())?;
                ttd::to_checkpoint(&cores)?.save(&cfg.out.join(method), crate::tensor::checkpoint::Dtype::F32)?;
                println!(
                    "{method}: I={:?} J={:?} R={} n={} fit mse {:.6} -> {:.6}",
                    tt.i_dims, tt.j_dims, tt.rank, tt.n, fit.initial_mse, fit.final_mse
                );
                let cores = Cores::new(tt, cores.cores.iter().map(|c| c.iter().map(|&x| x as f32).collect()).collect())?;
                if method == "tt" {
                    EmbeddingSource::Tt(cores)
                } else {
                    EmbeddingSource::Sttd(cores)
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown method {other:?}; expected dense, codec, tt or sttd"
                )))
            }
        };
        sources.push(source);
    }
    let enc = FrozenEncoder::<f32>::new(&teacher.cfg, &teacher.enc);
    let workload = Workload::generate(v, cfg.bench_sessions, teacher.cfg.max_len, cfg.seed);
    let latency = bench_reconstruction(&sources, &enc, &workload, &ds.vocab.hot, &cfg.bench())?;
    let sttd = cfg.tt(v, cfg.tt_n).ok();
    let memory = memory_footprint(&codes_path, teacher.enc.num_params() as u64, sttd.as_ref())?;
    write_json(&cfg.out.join("latency.json"), &latency)?;
    fs::write(cfg.out.join("latency.csv"), latency.csv())?;
    write_json(&cfg.out.join("memory.json"), &memory)?;
    cfg.write_resolved()?;
    print!("{}", latency.table());
    for c in &memory.components {
        println!("{:<10} {:>12} params {:>14} bytes", c.name, c.params, c.formula_bytes);
    }
    println!("codec compression ratio {:.2}", memory.codec_ratio);
    Ok(BenchOutcome { latency, memory })
}

/// Hard codes of the student over the teacher table, written as a packed file.
/// Without an explicit `--teacher`, the jointly trained teacher in `out` is
/// preferred when distillation left one there.
pub fn export_codes(cfg: &RunConfig) -> Result<PathBuf> {
    let student = Student::load(&cfg.student_path())?;
    let joint = cfg.out.join(JOINT_TEACHER);
    let teacher_path = match &cfg.teacher {
        None if crate::tensor::checkpoint::manifest_path(&joint).exists() => joint,
        _ => cfg.teacher_path(),
    };
    let teacher = RecModel::load(&teacher_path)?;
    let packed = student.deploy(&teacher.table)?;
    let path = cfg.codes_path();
    packed.save(&path)?;
    cfg.write_resolved()?;
    println!("{} ({} bytes)", path.display(), fs::metadata(&path)?.len());
    Ok(path)
}

/// JSON dump and codeword usage histogram of a packed code file.
pub fn inspect_codes(cfg: &RunConfig) -> Result<Vec<Vec<u64>>> {
    let packed = load_codes(&cfg.codes_path())?;
    let dump = packed.inspect_json();
    let hist = code_usage_histogram(&packed.codes);
    write_json(&cfg.out.join("codes_dump.json"), &dump)?;
    fs::write(cfg.out.join("code_histogram.csv"), histogram_csv(&hist))?;
    cfg.write_resolved()?;
    println!("{}", serde_json::to_string_pretty(&dump["header"])?);
    for (book, row) in hist.iter().enumerate() {
        let used = row.iter().filter(|&&c| c > 0).count();
        println!("book {book}: {used}/{} codewords used", row.len());
    }
    Ok(hist)
}

/// Prints the ratio grid; fails when any row differs from the reference.
pub fn check_ratios_cmd(cfg: &RunConfig) -> Result<()> {
    let rows = check_ratios()?;
    print!("{}", ratio_table(&rows));
    write_json(&cfg.out.join("ratios.json"), &rows)?;
    cfg.write_resolved()?;
    let bad = rows.iter().filter(|r| !r.matches()).count();
    if bad > 0 {
        return Err(Error::Accounting(format!("{bad} of {} ratio rows differ", rows.len())));
    }
    Ok(())
}

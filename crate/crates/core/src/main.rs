use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compact_rec::config::RunConfig;
use compact_rec::{run, Error};

#[derive(Parser)]
#[command(name = "compact-rec", version, about = "Compressed-embedding session recommendation")]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set beta=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Paths {
    /// Event log (prepare) or dataset cache directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    codes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset cache from an event log or the synthetic generator.
    Prepare {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train the uncompressed teacher.
    TrainTeacher {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Distill the teacher into a compositional-code student.
    Distill {
        #[command(flatten)]
        paths: Paths,
        /// stu-base, stu-w/o-c, stu-w/o-b, stu-w/o-s or stu-w/o-m.
        #[arg(long)]
        ablation: Option<String>,
        /// Keep the teacher frozen.
        #[arg(long)]
        no_bidirectional: bool,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        joint_epochs: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Test-split metrics of the teacher or the deployed student.
    Evaluate {
        #[command(flatten)]
        paths: Paths,
        /// teacher or student.
        #[arg(long)]
        model: Option<String>,
    },
    /// Scoring-pass latency and memory footprint.
    Bench {
        #[command(flatten)]
        paths: Paths,
        /// Comma-separated subset of dense,codec,tt,sttd.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        fit_steps: Option<usize>,
    },
    /// Write the student's hard codes and codebooks as a packed file.
    ExportCodes {
        #[command(flatten)]
        paths: Paths,
    },
    /// Dump a packed code file and its codeword usage histogram.
    InspectCodes {
        #[command(flatten)]
        paths: Paths,
    },
    /// Compare codebook compression ratios against the reference grid.
    CheckRatios,
}

fn put<T: Into<toml::Value>>(t: &mut toml::Table, key: &str, v: Option<T>) {
    if let Some(v) = v {
        t.insert(key.into(), v.into());
    }
}

fn put_path(t: &mut toml::Table, key: &str, v: Option<PathBuf>) {
    put(t, key, v.map(|p| p.to_string_lossy().into_owned()));
}

fn put_usize(t: &mut toml::Table, key: &str, v: Option<usize>) {
    put(t, key, v.map(|x| x as i64));
}

fn parse_set(kv: &str) -> Result<(String, toml::Value), String> {
    let (key, value) = kv
        .split_once('=')
        .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
    let key = key.trim().to_string();
    let value = format!("v = {}", value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().into()));
    Ok((key, value))
}

fn overrides(cli: Cli) -> Result<(Option<PathBuf>, toml::Table), String> {
    let mut t = toml::Table::new();
    for kv in &cli.set {
        let (k, v) = parse_set(kv)?;
        t.insert(k, v);
    }
    put(&mut t, "seed", cli.seed.map(|s| s as i64));
    put_path(&mut t, "out", cli.out);
    let (name, paths) = match cli.command {
        Command::Prepare { paths, synthetic, items, sessions, max_len } => {
            if synthetic {
                put(&mut t, "synthetic", Some(true));
            }
            put_usize(&mut t, "items", items);
            put_usize(&mut t, "sessions", sessions);
            put_usize(&mut t, "max_len", max_len);
            ("prepare", paths)
        }
        Command::TrainTeacher { paths, epochs, dim } => {
            put_usize(&mut t, "epochs", epochs);
            put_usize(&mut t, "dim", dim);
            ("train-teacher", paths)
        }
        Command::Distill { paths, ablation, no_bidirectional, pretrain_epochs, joint_epochs, m, k } => {
            put(&mut t, "ablation", ablation);
            if no_bidirectional {
                put(&mut t, "bidirectional", Some(false));
            }
            put_usize(&mut t, "pretrain_epochs", pretrain_epochs);
            put_usize(&mut t, "joint_epochs", joint_epochs);
            put_usize(&mut t, "m", m);
            put_usize(&mut t, "k", k);
            ("distill", paths)
        }
        Command::Evaluate { paths, model } => {
            put(&mut t, "model", model);
            ("evaluate", paths)
        }
        Command::Bench { paths, methods, reps, fit_steps } => {
            put(&mut t, "methods", methods);
            put_usize(&mut t, "reps", reps);
            put_usize(&mut t, "fit_steps", fit_steps);
            ("bench", paths)
        }
        Command::ExportCodes { paths } => ("export-codes", paths),
        Command::InspectCodes { paths } => ("inspect-codes", paths),
        Command::CheckRatios => ("check-ratios", Paths::default()),
    };
    put(&mut t, "command", Some(name));
    put_path(&mut t, "data", paths.data);
    put_path(&mut t, "teacher", paths.teacher);
    put_path(&mut t, "student", paths.student);
    put_path(&mut t, "codes", paths.codes);
    Ok((cli.config, t))
}

fn dispatch(cfg: &RunConfig) -> compact_rec::Result<()> {
    match cfg.command.as_str() {
        "prepare" => run::prepare(cfg).map(drop),
        "train-teacher" => run::train_teacher(cfg).map(drop),
        "distill" => run::distill(cfg).map(drop),
        "evaluate" => run::evaluate(cfg).map(drop),
        "bench" => run::bench(cfg).map(drop),
        "export-codes" => run::export_codes(cfg).map(drop),
        "inspect-codes" => run::inspect_codes(cfg).map(drop),
        _ => run::check_ratios_cmd(cfg),
    }
}

fn main() -> ExitCode {
    let (file, table) = match overrides(Cli::parse()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let result = RunConfig::resolve(file.as_deref(), table).and_then(|cfg| dispatch(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingInput(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

//! Flat run configuration: one TOML table, every key documented below.
//!
//! Values are layered as defaults, then the config file, then explicit
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, RecLoss};
use crate::codec::CodecConfig;
use crate::distill::{Ablation, DistillConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::ttd::{FitConfig, TTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced this configuration.
    pub command: String,
    pub seed: u64,
    /// Output directory for every artifact.
    pub out: PathBuf,
    /// Event log for `prepare`, dataset cache directory otherwise
    /// (defaults to `out`).
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub items: usize,
    pub sessions: usize,
    pub max_len: usize,

    // backbone
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub layer_norm: bool,
    pub loss: RecLoss,

    // optimizer and epochs
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,

    // codec
    pub m: usize,
    pub k: usize,
    pub temperature: f64,

    // distillation
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta: f64,
    pub mixup: bool,
    pub bidirectional: bool,
    pub include_teacher_rec: bool,
    pub alternating: bool,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub ablation: Option<Ablation>,

    // artifacts (default to files inside `out`)
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    /// `teacher` or `student` for `evaluate`.
    pub model: String,

    // tensor-train baselines; empty factor lists are derived from |V| and N
    pub tt_d: usize,
    pub tt_i: Vec<usize>,
    pub tt_j: Vec<usize>,
    pub tt_rank: usize,
    pub tt_n: usize,
    pub fit_steps: usize,
    pub fit_batch: usize,
    pub fit_lr: f64,

    // benchmark
    pub methods: Vec<String>,
    pub reps: usize,
    pub warmups: usize,
    pub bench_sessions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::new(1, 32, crate::data::DEFAULT_MAX_LEN);
        let dc = DistillConfig::default();
        let tc = TrainConfig::default();
        let fit = FitConfig::default();
        let bench = BenchConfig::default();
        RunConfig {
            command: String::new(),
            seed: 0,
            out: PathBuf::from("runs"),
            data: None,
            synthetic: false,
            items: 200,
            sessions: 2000,
            max_len: enc.max_len,
            dim: enc.dim,
            heads: enc.heads,
            dropout: enc.dropout,
            layer_norm: enc.layer_norm,
            loss: enc.loss,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            m: 4,
            k: 32,
            temperature: crate::codec::DEFAULT_TEMPERATURE,
            beta: dc.beta,
            gamma: dc.gamma,
            tau: dc.tau,
            eta: dc.eta,
            mixup: dc.mixup,
            bidirectional: dc.bidirectional,
            include_teacher_rec: dc.include_teacher_rec,
            alternating: dc.alternating,
            pretrain_epochs: dc.pretrain_epochs,
            joint_epochs: dc.joint_epochs,
            ablation: None,
            teacher: None,
            student: None,
            codes: None,
            model: "teacher".into(),
            tt_d: 3,
            tt_i: Vec::new(),
            tt_j: Vec::new(),
            tt_rank: 16,
            tt_n: 2,
            fit_steps: fit.steps,
            fit_batch: fit.batch_size,
            fit_lr: fit.lr,
            methods: ["dense", "codec", "tt", "sttd"].map(String::from).to_vec(),
            reps: bench.reps,
            warmups: bench.warmups,
            bench_sessions: crate::eval::bench::WORKLOAD_SESSIONS,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file` (if any), overlaid by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: toml::Table) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingInput(p.to_path_buf()));
                }
                fs::read_to_string(p)?
                    .parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        table.extend(overrides);
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `<command>.config.toml` into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let name = if self.command.is_empty() { "run" } else { &self.command };
        let path = self.out.join(format!("{name}.config.toml"));
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher.clone().unwrap_or_else(|| self.out.join("teacher"))
    }

    pub fn student_path(&self) -> PathBuf {
        self.student.clone().unwrap_or_else(|| self.out.join("student"))
    }

    pub fn codes_path(&self) -> PathBuf {
        self.codes.clone().unwrap_or_else(|| self.out.join("codes.ccec"))
    }

    pub fn encoder(&self, num_items: usize) -> EncoderConfig {
        EncoderConfig {
            num_items,
            dim: self.dim,
            max_len: self.max_len,
            heads: self.heads,
            dropout: self.dropout,
            layer_norm: self.layer_norm,
            loss: self.loss,
        }
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            temperature: self.temperature,
            mixup: self.eta,
            ..CodecConfig::new(self.m, self.k, self.dim)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// Distillation settings with the ablation (if any) applied last.
    pub fn distill(&self) -> DistillConfig {
        let mut dc = DistillConfig {
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
            eta: self.eta,
            mixup: self.mixup,
            bidirectional: self.bidirectional,
            include_teacher_rec: self.include_teacher_rec,
            alternating: self.alternating,
            pretrain_epochs: self.pretrain_epochs,
            joint_epochs: self.joint_epochs,
        };
        if let Some(a) = self.ablation {
            a.apply(&mut dc);
        }
        dc
    }

    /// Writes the effect of `ablation` back into the flat keys so the
    /// resolved file records it.
    pub fn apply_ablation(&mut self) {
        let dc = self.distill();
        self.beta = dc.beta;
        self.gamma = dc.gamma;
        self.mixup = dc.mixup;
        self.bidirectional = dc.bidirectional;
    }

    /// STTD factors for a `num_items × dim` table with block factor `n`.
    pub fn tt(&self, num_items: usize, n: usize) -> Result<TTConfig> {
        if self.tt_i.is_empty() && self.tt_j.is_empty() {
            return TTConfig::balanced(num_items, self.dim, self.tt_d, self.tt_rank, n);
        }
        let cfg = TTConfig {
            i_dims: self.tt_i.clone(),
            j_dims: self.tt_j.clone(),
            rank: self.tt_rank,
            n,
        };
        cfg.validate(num_items, self.dim)?;
        Ok(cfg)
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            steps: self.fit_steps,
            batch_size: self.fit_batch,
            lr: self.fit_lr,
            seed: self.seed,
        }
    }

    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            warmups: self.warmups,
            reps: self.reps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> toml::Table {
        s.parse().unwrap()
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "seed = 3\ndim = 16\nbeta = 0.5\n").unwrap();
        let c = RunConfig::resolve(Some(&file), table("seed = 9")).unwrap();
        assert_eq!((c.seed, c.dim, c.beta), (9, 16, 0.5));
        assert_eq!(c.m, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::resolve(None, table("bogus = 1")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let missing = RunConfig::resolve(Some(Path::new("/nonexistent/run.toml")), toml::Table::new());
        assert!(matches!(missing, Err(Error::MissingInput(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::resolve(None, table("ablation = \"stu-base\"\ntt_i = [6, 6, 6]")).unwrap();
        c.apply_ablation();
        assert_eq!((c.beta, c.gamma, c.mixup), (0.0, 0.0, false));
        let back = RunConfig::resolve(None, c.to_toml().unwrap().parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn builds_module_configs() {
        let c = RunConfig::default();
        assert_eq!(c.encoder(50).num_items, 50);
        assert_eq!(c.codec().k, 32);
        assert!(c.distill().validate().is_ok());
        let tt = c.tt(188, 2).unwrap();
        assert_eq!(tt.dim(), 32);
        assert_eq!(c.tt(188, 1).unwrap().n, 1);
    }
}

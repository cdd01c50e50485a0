//! Teacher/student distillation with compositional student embeddings.
//!
//! The joint objective for one batch is
//!
//! ```text
//! L = L_rec(stu) [+ L_rec(tea)] + L_mse + β L_con + γ L_soft
//! ```
//!
//! where the student scores with `E' = η X + (1 − η) e` (mixup on) or the
//! composite `e` itself, `L_con` is InfoNCE over recombined hot/cold session
//! representations, and `L_soft` is `KL(prob_tea ‖ prob_stu)`.

mod train;

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, EncoderConfig, EncoderParams, EncoderVars, FrozenEncoder, RecModel, INIT_RANGE};
use crate::codec::{self, gumbel_noise, CodecConfig, CodecParams, CodecVars, PackedCodes};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{param_group, ParamGroup};
use crate::tensor::checkpoint::{Checkpoint, Dtype};
use crate::tensor::{Tape, Tensor, Var};

pub use train::{
    distill, evaluate_student, evaluate_teacher, train_teacher, DistillOutcome, EpochLog, Phase,
    TeacherOutcome, TrainConfig,
};

pub const KL_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta: f64,
    /// Embedding mixup while training the student.
    pub mixup: bool,
    /// Joint gradients into the teacher; false freezes it.
    pub bidirectional: bool,
    /// Adds the teacher's own recommendation loss when it is trainable.
    pub include_teacher_rec: bool,
    /// Alternate student-only and teacher-only steps instead of joint ones.
    pub alternating: bool,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.01,
            gamma: 0.3,
            tau: 0.2,
            eta: codec::DEFAULT_MIXUP,
            mixup: true,
            bidirectional: true,
            include_teacher_rec: true,
            alternating: false,
            pretrain_epochs: 5,
            joint_epochs: 30,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Parameter(format!(
                "beta = {} and gamma = {} must be non-negative",
                self.beta, self.gamma
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Parameter(format!("eta = {} not in (0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// The five ablated student variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "stu-base")]
    Base,
    #[serde(rename = "stu-w/o-c")]
    NoContrastive,
    #[serde(rename = "stu-w/o-b")]
    NoBidirectional,
    #[serde(rename = "stu-w/o-s")]
    NoSoftTargets,
    #[serde(rename = "stu-w/o-m")]
    NoMixup,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Base,
        Ablation::NoContrastive,
        Ablation::NoBidirectional,
        Ablation::NoSoftTargets,
        Ablation::NoMixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "stu-base",
            Ablation::NoContrastive => "stu-w/o-c",
            Ablation::NoBidirectional => "stu-w/o-b",
            Ablation::NoSoftTargets => "stu-w/o-s",
            Ablation::NoMixup => "stu-w/o-m",
        }
    }

    /// Accepts the variant names with or without the `stu-` prefix and with
    /// `-` in place of `/`.
    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('/', "-");
        let key = key.strip_prefix("stu-").unwrap_or(&key);
        Ok(match key {
            "base" => Ablation::Base,
            "w-o-c" => Ablation::NoContrastive,
            "w-o-b" => Ablation::NoBidirectional,
            "w-o-s" => Ablation::NoSoftTargets,
            "w-o-m" => Ablation::NoMixup,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation {s:?}; expected one of stu-base, stu-w/o-c, stu-w/o-b, stu-w/o-s, stu-w/o-m"
                )))
            }
        })
    }

    pub fn apply(self, cfg: &mut DistillConfig) {
        match self {
            Ablation::Base => {
                cfg.beta = 0.0;
                cfg.gamma = 0.0;
                cfg.mixup = false;
            }
            Ablation::NoContrastive => cfg.beta = 0.0,
            Ablation::NoBidirectional => cfg.bidirectional = false,
            Ablation::NoSoftTargets => cfg.gamma = 0.0,
            Ablation::NoMixup => cfg.mixup = false,
        }
    }
}

param_group! {
    /// `W_t` and `W_s`, both `N × 2N`.
    pub struct ProjectionParams => ProjectionVars { w_t, w_s }
}

impl ProjectionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        ProjectionParams {
            w_t: Tensor::uniform(&[dim, 2 * dim], -INIT_RANGE, INIT_RANGE, rng),
            w_s: Tensor::uniform(&[dim, 2 * dim], -INIT_RANGE, INIT_RANGE, rng),
        }
    }
}

/// The compressed model: its own encoder, the code generator and codebooks,
/// and the contrastive projections used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub cfg: EncoderConfig,
    pub codec_cfg: CodecConfig,
    pub enc: EncoderParams,
    pub codec: CodecParams,
    pub proj: ProjectionParams,
}

impl Student {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, codec_cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        codec_cfg.validate()?;
        if codec_cfg.dim != cfg.dim {
            return Err(Error::Parameter(format!(
                "codec N = {} differs from encoder N = {}",
                codec_cfg.dim, cfg.dim
            )));
        }
        Ok(Student {
            cfg: cfg.clone(),
            codec_cfg: codec_cfg.clone(),
            enc: EncoderParams::init(cfg, rng),
            codec: CodecParams::init(codec_cfg, rng),
            proj: ProjectionParams::init(cfg.dim, rng),
        })
    }

    /// Hard codes for `x` (the teacher table) plus the codebooks.
    pub fn deploy(&self, x: &Tensor) -> Result<PackedCodes> {
        PackedCodes::new(codec::harden(&self.codec_cfg, &self.codec, x)?, &self.codec.books)
    }

    pub fn frozen(&self) -> FrozenEncoder<f64> {
        FrozenEncoder::new(&self.cfg, &self.enc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "student",
            "encoder": self.cfg,
            "codec": self.codec_cfg,
        }));
        self.enc.write_into("enc.", &mut ck);
        self.codec.write_into("codec.", &mut ck);
        self.proj.write_into("proj.", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("student") {
            return Err(Error::Format("checkpoint is not a student model".into()));
        }
        Ok(Student {
            cfg: serde_json::from_value(ck.config["encoder"].clone())?,
            codec_cfg: serde_json::from_value(ck.config["codec"].clone())?,
            enc: EncoderParams::read_from("enc.", ck)?,
            codec: CodecParams::read_from("codec.", ck)?,
            proj: ProjectionParams::read_from("proj.", ck)?,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.to_checkpoint().save(stem, Dtype::F64)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Student::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

/// Hot and cold session representations, `[B, N]` each; absent parts are zero.
#[derive(Clone, Debug)]
pub struct HotColdReps {
    pub hot: Var,
    pub cold: Var,
    pub hot_present: Vec<bool>,
    pub cold_present: Vec<bool>,
}

/// Pools the hot-item and cold-item sub-sessions independently.
pub fn hot_cold_representations(
    tape: &mut Tape,
    p: &EncoderVars,
    reps: Var,
    batch: &Batch,
) -> Result<HotColdReps> {
    let (b, w) = (batch.size(), batch.width);
    let present = |mask: &[bool]| -> Vec<bool> {
        mask.chunks(w).map(|row| row.iter().any(|&m| m)).collect()
    };
    Ok(HotColdReps {
        hot: backbone::pool(tape, p, reps, b, w, &batch.hot, true)?,
        cold: backbone::pool(tape, p, reps, b, w, &batch.cold, true)?,
        hot_present: present(&batch.hot),
        cold_present: present(&batch.cold),
    })
}

/// `z_tea = [hot_tea ; cold_stu]`, `z_stu = [hot_stu ; cold_tea]`, each `[B, 2N]`.
pub fn recombine(tape: &mut Tape, tea: &HotColdReps, stu: &HotColdReps) -> Result<(Var, Var)> {
    let z_tea = tape.concat(&[tea.hot, stu.cold])?;
    let z_stu = tape.concat(&[stu.hot, tea.cold])?;
    Ok((z_tea, z_stu))
}

/// InfoNCE over in-batch student-side negatives, summed over the batch.
pub fn contrastive_loss(
    tape: &mut Tape,
    z_tea: Var,
    z_stu: Var,
    proj: &ProjectionVars,
    tau: f64,
) -> Result<Var> {
    let b = tape.shape(z_tea)[0];
    let wt = tape.transpose(proj.w_t)?;
    let ws = tape.transpose(proj.w_s)?;
    let pt = tape.matmul(z_tea, wt)?;
    let ps = tape.matmul(z_stu, ws)?;
    let sim = tape.cosine_similarity(pt, ps)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let labels: Vec<usize> = (0..b).collect();
    let mean = tape.cross_entropy(logits, &labels)?;
    Ok(tape.scale(mean, b as f64))
}

/// Batch-mean `KL(softmax(tea) ‖ softmax(stu))` with probabilities clamped
/// at `1e-10`.
pub fn soft_target_loss(tape: &mut Tape, logits_tea: Var, logits_stu: Var) -> Result<Var> {
    let b = tape.shape(logits_tea)[0];
    let pt = tape.softmax(logits_tea, 1.0)?;
    let ps = tape.softmax(logits_stu, 1.0)?;
    let pt = tape.clamp(pt, KL_FLOOR, 1.0);
    let ps = tape.clamp(ps, KL_FLOOR, 1.0);
    let lt = tape.log(pt);
    let ls = tape.log(ps);
    let d = tape.sub(lt, ls)?;
    let kl = tape.mul(pt, d)?;
    let kl = tape.sum(kl);
    Ok(tape.scale(kl, 1.0 / b as f64))
}

/// Plain-slice KL with the same clamping.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.clamp(KL_FLOOR, 1.0), b.clamp(KL_FLOOR, 1.0));
            a * (a / b).ln()
        })
        .sum()
}

/// Tape handles for everything the joint loss touches.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub table: Var,
    pub tea: EncoderVars,
    pub stu: EncoderVars,
    pub codec: CodecVars,
    pub proj: ProjectionVars,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub teacher: bool,
    pub student: bool,
}

impl JointVars {
    pub fn bind(tape: &mut Tape, teacher: &RecModel, student: &Student, t: Trainable) -> Self {
        JointVars {
            table: crate::params::bind_one(tape, &teacher.table, t.teacher),
            tea: teacher.enc.bind(tape, t.teacher),
            stu: student.enc.bind(tape, t.student),
            codec: student.codec.bind(tape, t.student),
            proj: student.proj.bind(tape, t.student),
        }
    }
}

/// Loss coefficients in effect for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub teacher_rec: bool,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// `Some(η)` enables mixup.
    pub mixup: Option<f64>,
}

impl LossWeights {
    /// Student pretraining: `L_rec(stu) + L_mse`.
    pub fn pretrain(cfg: &DistillConfig) -> Self {
        LossWeights {
            teacher_rec: false,
            beta: 0.0,
            gamma: 0.0,
            tau: cfg.tau,
            mixup: cfg.mixup.then_some(cfg.eta),
        }
    }

    pub fn joint(cfg: &DistillConfig) -> Self {
        LossWeights {
            teacher_rec: cfg.bidirectional && cfg.include_teacher_rec,
            beta: cfg.beta,
            gamma: cfg.gamma,
            tau: cfg.tau,
            mixup: cfg.mixup.then_some(cfg.eta),
        }
    }
}

/// Values of every term for one batch. Terms whose coefficient is zero are
/// still reported but are not part of `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec_stu: f64,
    pub rec_tea: f64,
    pub mse: f64,
    pub con: f64,
    pub soft: f64,
    pub total: f64,
}

impl LossTerms {
    /// Names the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("L_rec_stu", self.rec_stu),
            ("L_rec_tea", self.rec_tea),
            ("L_mse", self.mse),
            ("L_con", self.con),
            ("L_soft", self.soft),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Records the joint objective for `batch`. With `rng` the step is a training
/// step (Gumbel noise and dropout); without it everything is deterministic.
pub fn total_loss(
    tape: &mut Tape,
    enc_cfg: &EncoderConfig,
    codec_cfg: &CodecConfig,
    v: &JointVars,
    batch: &Batch,
    w: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossTerms)> {
    let num_items = enc_cfg.num_items;
    let noise = rng
        .as_deref_mut()
        .map(|r| gumbel_noise(num_items * codec_cfg.m * codec_cfg.k, r));
    let (_, _, e) = codec::forward(tape, codec_cfg, &v.codec, v.table, noise.as_deref())?;
    let l_mse = codec::mse_loss(tape, e, v.table)?;
    let e_train = match w.mixup {
        Some(eta) => codec::mixup(tape, e, v.table, eta)?,
        None => e,
    };

    let labels = batch.labels_usize();
    let valid = batch.valid_mask();
    let (b, width) = (batch.size(), batch.width);

    let reps_s = backbone::encode(tape, enc_cfg, &v.stu, e_train, batch, rng.as_deref_mut())?;
    let theta_s = backbone::pool(tape, &v.stu, reps_s, b, width, &valid, false)?;
    let logits_s = backbone::logits(tape, theta_s, e_train)?;
    let l_rec_s = backbone::rec_loss(tape, logits_s, &labels, enc_cfg.loss)?;

    let reps_t = backbone::encode(tape, enc_cfg, &v.tea, v.table, batch, rng.as_deref_mut())?;
    let theta_t = backbone::pool(tape, &v.tea, reps_t, b, width, &valid, false)?;
    let logits_t = backbone::logits(tape, theta_t, v.table)?;
    let l_rec_t = backbone::rec_loss(tape, logits_t, &labels, enc_cfg.loss)?;

    let hc_t = hot_cold_representations(tape, &v.tea, reps_t, batch)?;
    let hc_s = hot_cold_representations(tape, &v.stu, reps_s, batch)?;
    let (z_tea, z_stu) = recombine(tape, &hc_t, &hc_s)?;
    let l_con = contrastive_loss(tape, z_tea, z_stu, &v.proj, w.tau)?;
    let l_soft = soft_target_loss(tape, logits_t, logits_s)?;

    let mut total = tape.add(l_rec_s, l_mse)?;
    if w.teacher_rec {
        total = tape.add(total, l_rec_t)?;
    }
    if w.beta != 0.0 {
        let c = tape.scale(l_con, w.beta);
        total = tape.add(total, c)?;
    }
    if w.gamma != 0.0 {
        let s = tape.scale(l_soft, w.gamma);
        total = tape.add(total, s)?;
    }
    let val = |t: &Tape, x: Var| t.value(x).item();
    let terms = LossTerms {
        rec_stu: val(tape, l_rec_s),
        rec_tea: val(tape, l_rec_t),
        mse: val(tape, l_mse),
        con: val(tape, l_con),
        soft: val(tape, l_soft),
        total: val(tape, total),
    };
    Ok((total, terms))
}

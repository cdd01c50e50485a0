//! Training drivers: teacher only, then student pretraining and the joint loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{total_loss, DistillConfig, JointVars, LossTerms, LossWeights, Student, Trainable};
use crate::backbone::{self, RecModel};
use crate::codec::{reconstruct_all, PackedCodes};
use crate::data::{make_batches, SessionDataset, Sequence};
use crate::error::{Error, Result};
use crate::eval::{self, RankingReport};
use crate::params::{adam_update, ParamGroup};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 100,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Pretrain,
    Joint,
}

/// One line of the training log. Terms not optimized in a phase are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    #[serde(rename = "L_rec_stu")]
    pub rec_stu: Option<f64>,
    #[serde(rename = "L_rec_tea")]
    pub rec_tea: Option<f64>,
    #[serde(rename = "L_mse")]
    pub mse: Option<f64>,
    #[serde(rename = "L_con")]
    pub con: Option<f64>,
    #[serde(rename = "L_soft")]
    pub soft: Option<f64>,
    #[serde(rename = "val_P@10")]
    pub val_p10: f64,
    #[serde(rename = "val_NDCG@10")]
    pub val_ndcg10: f64,
    pub wall_time_s: f64,
}

pub fn evaluate_teacher(model: &RecModel, seqs: &[Sequence], hot: &[bool]) -> Result<RankingReport> {
    eval::evaluate(&model.frozen(), model.table.data(), seqs, hot)
}

/// Scores with the deployed path: hard codes over `x` and the codebooks.
pub fn evaluate_student(
    student: &Student,
    x: &Tensor,
    seqs: &[Sequence],
    hot: &[bool],
) -> Result<RankingReport> {
    let codes = crate::codec::harden(&student.codec_cfg, &student.codec, x)?;
    let mut table = vec![0.0; x.numel()];
    reconstruct_all(&codes, student.codec.books.data(), x.cols(), &mut table)?;
    eval::evaluate(&student.frozen(), &table, seqs, hot)
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub logs: Vec<EpochLog>,
    /// 0 when the initial weights were never beaten.
    pub best_epoch: usize,
    pub valid: RankingReport,
    pub test: RankingReport,
}

fn check_terms(terms: &LossTerms, phase: Phase, epoch: usize) -> Result<()> {
    match terms.non_finite() {
        Some(name) => Err(Error::NonFinite(format!(
            "{name} in {phase:?} epoch {epoch}: {terms:?}"
        ))),
        None => Ok(()),
    }
}

/// Trains the uncompressed model on `L_rec`, keeping the weights with the best
/// validation P@10.
pub fn train_teacher(
    ds: &SessionDataset,
    model: &mut RecModel,
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TeacherOutcome> {
    let hot = &ds.vocab.hot;
    let started = Instant::now();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ DROPOUT_STREAM);
    let mut adam = tc.adam();
    let mut best = model.clone();
    let mut best_val = evaluate_teacher(model, &ds.valid, hot)?;
    let mut best_epoch = 0;
    let mut logs = Vec::with_capacity(tc.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=tc.epochs {
        let mut sum = 0.0;
        let batches = make_batches(ds, tc.batch_size, tc.seed.wrapping_add(epoch as u64))?;
        for batch in &batches {
            tape.reset();
            let table = tape.leaf(model.table.clone());
            let p = model.enc.bind(&mut tape, true);
            let reps = backbone::encode(&mut tape, &model.cfg, &p, table, batch, Some(&mut drop_rng))?;
            let valid = batch.valid_mask();
            let theta = backbone::pool(&mut tape, &p, reps, batch.size(), batch.width, &valid, false)?;
            let logits = backbone::logits(&mut tape, theta, table)?;
            let loss = backbone::rec_loss(&mut tape, logits, &batch.labels_usize(), model.cfg.loss)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("L_rec_tea in Teacher epoch {epoch}")));
            }
            sum += value;
            let grads = tape.backward(loss)?;
            let mut vars: Vec<Var> = vec![table];
            vars.extend(p.vars());
            let mut params: Vec<&mut Tensor> = vec![&mut model.table];
            params.extend(model.enc.tensors_mut());
            adam_update(&mut adam, params, &vars, &grads)?;
        }
        let val = evaluate_teacher(model, &ds.valid, hot)?;
        let log = EpochLog {
            phase: Phase::Teacher,
            epoch,
            rec_stu: None,
            rec_tea: Some(sum / batches.len() as f64),
            mse: None,
            con: None,
            soft: None,
            val_p10: val.p10,
            val_ndcg10: val.ndcg10,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
        if val.p10 > best_val.p10 {
            best = model.clone();
            best_val = val;
            best_epoch = epoch;
        }
    }
    *model = best;
    Ok(TeacherOutcome {
        logs,
        best_epoch,
        valid: best_val,
        test: evaluate_teacher(model, &ds.test, hot)?,
    })
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Student,
    pub packed: PackedCodes,
    pub logs: Vec<EpochLog>,
    /// Epoch counter across both phases; 0 means the initial state.
    pub best_epoch: usize,
    pub valid: RankingReport,
    pub test: RankingReport,
}

struct Snapshot {
    teacher: RecModel,
    student: Student,
    val: RankingReport,
    epoch: usize,
}

/// Student pretraining followed by the joint loop. `teacher` is updated in
/// place when the joint loop trains it; both models end at the epoch with the
/// best student validation P@10.
pub fn distill(
    ds: &SessionDataset,
    teacher: &mut RecModel,
    mut student: Student,
    dc: &DistillConfig,
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<DistillOutcome> {
    dc.validate()?;
    if teacher.cfg != student.cfg {
        return Err(Error::Parameter("teacher and student encoder configs differ".into()));
    }
    let hot = &ds.vocab.hot;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ DROPOUT_STREAM);
    let mut adam_t = tc.adam();
    let mut adam_s = tc.adam();
    let mut best = Snapshot {
        val: evaluate_student(&student, &teacher.table, &ds.valid, hot)?,
        teacher: teacher.clone(),
        student: student.clone(),
        epoch: 0,
    };
    let mut logs = Vec::new();
    let mut tape = Tape::new();
    let mut step = 0usize;
    let phases = [
        (Phase::Pretrain, dc.pretrain_epochs, LossWeights::pretrain(dc)),
        (Phase::Joint, dc.joint_epochs, LossWeights::joint(dc)),
    ];
    let mut epoch = 0;
    for (phase, epochs, weights) in phases {
        for _ in 0..epochs {
            epoch += 1;
            let batches = make_batches(ds, tc.batch_size, tc.seed.wrapping_add(epoch as u64))?;
            let mut sums = LossTerms::default();
            for batch in &batches {
                let trainable = match phase {
                    Phase::Joint if dc.bidirectional && dc.alternating => Trainable {
                        teacher: step % 2 == 1,
                        student: step % 2 == 0,
                    },
                    Phase::Joint => Trainable { teacher: dc.bidirectional, student: true },
                    _ => Trainable { teacher: false, student: true },
                };
                step += 1;
                tape.reset();
                let v = JointVars::bind(&mut tape, teacher, &student, trainable);
                let (loss, terms) =
                    total_loss(&mut tape, &teacher.cfg, &student.codec_cfg, &v, batch, &weights, Some(&mut rng))?;
                check_terms(&terms, phase, epoch)?;
                sums.rec_stu += terms.rec_stu;
                sums.rec_tea += terms.rec_tea;
                sums.mse += terms.mse;
                sums.con += terms.con;
                sums.soft += terms.soft;
                let grads = tape.backward(loss)?;
                if trainable.student {
                    let mut vars = v.stu.vars();
                    vars.extend(v.codec.vars());
                    vars.extend(v.proj.vars());
                    let mut params = student.enc.tensors_mut();
                    params.extend(student.codec.tensors_mut());
                    params.extend(student.proj.tensors_mut());
                    adam_update(&mut adam_s, params, &vars, &grads)?;
                }
                if trainable.teacher {
                    let mut vars = vec![v.table];
                    vars.extend(v.tea.vars());
                    let mut params: Vec<&mut Tensor> = vec![&mut teacher.table];
                    params.extend(teacher.enc.tensors_mut());
                    adam_update(&mut adam_t, params, &vars, &grads)?;
                }
            }
            let nb = batches.len() as f64;
            let val = evaluate_student(&student, &teacher.table, &ds.valid, hot)?;
            let joint = phase == Phase::Joint;
            let log = EpochLog {
                phase,
                epoch,
                rec_stu: Some(sums.rec_stu / nb),
                rec_tea: Some(sums.rec_tea / nb),
                mse: Some(sums.mse / nb),
                con: joint.then_some(sums.con / nb),
                soft: joint.then_some(sums.soft / nb),
                val_p10: val.p10,
                val_ndcg10: val.ndcg10,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            on_epoch(&log);
            logs.push(log);
            if val.p10 > best.val.p10 {
                best = Snapshot {
                    teacher: teacher.clone(),
                    student: student.clone(),
                    val,
                    epoch,
                };
            }
        }
    }
    *teacher = best.teacher;
    let student = best.student;
    let packed = student.deploy(&teacher.table)?;
    let test = evaluate_student(&student, &teacher.table, &ds.test, hot)?;
    Ok(DistillOutcome {
        student,
        packed,
        logs,
        best_epoch: best.epoch,
        valid: best.val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::codec::CodecConfig;
    use crate::data::{build_dataset, gen_synthetic};

    fn tiny() -> SessionDataset {
        build_dataset(&gen_synthetic(40, 150, 2).unwrap(), 2, 10).unwrap()
    }

    fn models(ds: &SessionDataset) -> (RecModel, Student) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig::new(ds.num_items(), 8, ds.max_len);
        let t = RecModel::init(&cfg, &mut rng).unwrap();
        let s = Student::init(&cfg, &CodecConfig::new(2, 4, 8), &mut rng).unwrap();
        (t, s)
    }

    #[test]
    fn zero_epoch_teacher_is_initial() {
        let ds = tiny();
        let (mut t, _) = models(&ds);
        let init = t.clone();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_teacher(&ds, &mut t, &tc, &mut |_| {}).unwrap();
        assert_eq!(t, init);
        assert!(out.logs.is_empty());
    }

    #[test]
    fn frozen_teacher_is_untouched() {
        let ds = tiny();
        let (mut t, s) = models(&ds);
        let before = t.clone();
        let dc = DistillConfig {
            bidirectional: false,
            pretrain_epochs: 1,
            joint_epochs: 2,
            ..DistillConfig::default()
        };
        let tc = TrainConfig { batch_size: 50, lr: 1e-2, ..TrainConfig::default() };
        let mut lines = Vec::new();
        let out = distill(&ds, &mut t, s, &dc, &tc, &mut |l| lines.push(serde_json::to_string(l).unwrap())).unwrap();
        assert_eq!(t, before);
        assert_eq!(out.logs.len(), 3);
        assert!(lines[2].contains("\"L_con\":") && lines[2].contains("\"val_P@10\":"));
        assert!(lines[0].contains("\"L_soft\":null"));
    }

    #[test]
    fn joint_run_is_deterministic_and_moves_teacher() {
        let ds = tiny();
        let dc = DistillConfig { pretrain_epochs: 1, joint_epochs: 1, ..DistillConfig::default() };
        let tc = TrainConfig { batch_size: 50, lr: 1e-2, ..TrainConfig::default() };
        let run = || {
            let (mut t, s) = models(&ds);
            let out = distill(&ds, &mut t, s, &dc, &tc, &mut |_| {}).unwrap();
            (t, out)
        };
        let (t1, o1) = run();
        let (t2, o2) = run();
        assert_eq!(t1, t2);
        assert_eq!(o1.student, o2.student);
        assert_eq!(o1.packed, o2.packed);
        let strip = |l: &[EpochLog]| l.iter().map(|e| EpochLog { wall_time_s: 0.0, ..e.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&o1.logs), strip(&o2.logs));
        if o1.best_epoch == 2 {
            assert_ne!(t1, models(&ds).0);
        }
    }
}

//! Central finite-difference checks of every differentiable tape operation
//! and of the full distillation objective.

use std::rc::Rc;

use compact_rec::backbone::{self, EncoderConfig, RecLoss, RecModel};
use compact_rec::codec::{self, CodecConfig};
use compact_rec::data::{Batch, Sequence};
use compact_rec::distill::{
    contrastive_loss, hot_cold_representations, recombine, soft_target_loss, total_loss, DistillConfig,
    JointVars, LossWeights, Student, Trainable,
};
use compact_rec::params::ParamGroup;
use compact_rec::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 10;
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> compact_rec::Result<Var> + 'a;

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn scalar_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn value_of(build: &Build, inputs: &[Tensor], weights: &Option<Tensor>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    match weights {
        Some(w) => {
            let l = scalar_loss(&mut tape, out, w);
            tape.value(l).item()
        }
        None => tape.value(out).item(),
    }
}

/// `‖g − ĝ‖ / max(‖g‖ + ‖ĝ‖, 1e-12)` over every input entry.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

fn gradcheck(name: &str, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights = (tape.value(out).numel() != 1)
        .then(|| Tensor::uniform(tape.shape(out), -1.0, 1.0, rng));
    let loss = match &weights {
        Some(w) => scalar_loss(&mut tape, out, w),
        None => out,
    };
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.tensor(vars[i]).data());
        for j in 0..t.numel() {
            let mut up = inputs.clone();
            let mut down = inputs.clone();
            up[i].data_mut()[j] += STEP;
            down[i].data_mut()[j] -= STEP;
            numeric.push((value_of(build, &up, &weights) - value_of(build, &down, &weights)) / (2.0 * STEP));
        }
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < TOL, "{name}: relative error {err:e}");
    assert!(analytic.iter().any(|g| *g != 0.0), "{name}: gradient identically zero");
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values bounded away from zero in magnitude.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = u(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn each_instance(name: &str, mut f: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (inputs, build) = f(&mut rng);
        gradcheck(&format!("{name} #{seed}"), inputs, &mut rng, &*build);
    }
}

pub fn matmul_and_bmm() {
    each_instance("matmul", |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        (vec![u(&[m, k], r), u(&[k, n], r)], Box::new(|t, v| t.matmul(v[0], v[1])))
    });
    each_instance("bmm", |r| {
        let (b, m, k, n) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
        (vec![u(&[b, m, k], r), u(&[b, k, n], r)], Box::new(|t, v| t.bmm(v[0], v[1])))
    });
}

pub fn shape_ops() {
    each_instance("transpose", |r| {
        let (b, m, n) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
        (vec![u(&[b, m, n], r)], Box::new(|t, v| t.transpose(v[0])))
    });
    each_instance("reshape", |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 1, 4));
        (vec![u(&[m, n], r)], Box::new(move |t, v| t.reshape(v[0], &[n, m])))
    });
    each_instance("concat", |r| {
        let (m, a, b) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
        (vec![u(&[m, a], r), u(&[m, b], r)], Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])))
    });
    each_instance("slice_last", |r| {
        let (m, n) = (dims(r, 1, 3), dims(r, 2, 5));
        let s = r.random_range(0..n - 1);
        let e = r.random_range(s + 1..=n);
        (vec![u(&[m, n], r)], Box::new(move |t, v| t.slice_last(v[0], s, e)))
    });
    each_instance("gather_rows", |r| {
        let (rows, n) = (dims(r, 2, 5), dims(r, 1, 4));
        let idx: Vec<usize> = (0..dims(r, 1, 6)).map(|_| r.random_range(0..rows)).collect();
        (vec![u(&[rows, n], r)], Box::new(move |t, v| t.gather_rows(v[0], &idx)))
    });
}

pub fn elementwise_binary() {
    each_instance("add", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        (vec![u(&s, r), u(&s, r)], Box::new(|t, v| t.add(v[0], v[1])))
    });
    each_instance("sub", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        (vec![u(&s, r), u(&s, r)], Box::new(|t, v| t.sub(v[0], v[1])))
    });
    each_instance("mul", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        (vec![u(&s, r), u(&s, r)], Box::new(|t, v| t.mul(v[0], v[1])))
    });
    each_instance("add_row", |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 1, 4));
        (vec![u(&[m, n], r), u(&[n], r)], Box::new(|t, v| t.add_row(v[0], v[1])))
    });
}

pub fn elementwise_unary() {
    each_instance("scale", |r| {
        let s: f64 = r.random_range(-2.0..2.0);
        (vec![u(&[dims(r, 1, 5)], r)], Box::new(move |t, v| Ok(t.scale(v[0], s))))
    });
    each_instance("add_scalar", |r| {
        let s: f64 = r.random_range(-2.0..2.0);
        (vec![u(&[dims(r, 1, 5)], r)], Box::new(move |t, v| Ok(t.add_scalar(v[0], s))))
    });
    each_instance("tanh", |r| (vec![u(&[dims(r, 1, 5), 2], r)], Box::new(|t, v| Ok(t.tanh(v[0])))));
    each_instance("sigmoid", |r| (vec![u(&[dims(r, 1, 5), 2], r)], Box::new(|t, v| Ok(t.sigmoid(v[0])))));
    each_instance("softplus", |r| (vec![u(&[dims(r, 1, 5), 2], r)], Box::new(|t, v| Ok(t.softplus(v[0])))));
    each_instance("relu", |r| (vec![away_from_zero(&[dims(r, 1, 5), 2], r)], Box::new(|t, v| Ok(t.relu(v[0])))));
    each_instance("exp", |r| (vec![u(&[dims(r, 1, 5), 2], r)], Box::new(|t, v| Ok(t.exp(v[0])))));
    each_instance("log", |r| {
        let mut x = u(&[dims(r, 1, 5), 2], r);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
        (vec![x], Box::new(|t, v| Ok(t.log(v[0]))))
    });
    each_instance("clamp", |r| {
        // interior points only; the clamp is flat outside
        let mut x = u(&[dims(r, 1, 5), 2], r);
        x.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        (vec![x], Box::new(|t, v| Ok(t.clamp(v[0], -0.8, 0.8))))
    });
}

pub fn reductions() {
    each_instance("sum", |r| (vec![u(&[dims(r, 1, 4), dims(r, 1, 4)], r)], Box::new(|t, v| Ok(t.sum(v[0])))));
    each_instance("mean", |r| (vec![u(&[dims(r, 1, 4), dims(r, 1, 4)], r)], Box::new(|t, v| Ok(t.mean(v[0])))));
    each_instance("sum_last", |r| {
        (vec![u(&[dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4)], r)], Box::new(|t, v| Ok(t.sum_last(v[0]))))
    });
}

pub fn softmax_family() {
    each_instance("softmax", |r| {
        let temp: f64 = r.random_range(0.3..2.0);
        (vec![u(&[dims(r, 1, 4), dims(r, 2, 5)], r)], Box::new(move |t, v| t.softmax(v[0], temp)))
    });
    each_instance("masked_softmax", |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 2, 5));
        let mut mask: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.6)).collect();
        mask[0] = true;
        let mask = Rc::new(mask);
        (vec![u(&[m, n], r)], Box::new(move |t, v| t.masked_softmax(v[0], mask.clone())))
    });
    each_instance("cross_entropy", |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 2, 5));
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
        (vec![u(&[m, n], r)], Box::new(move |t, v| t.cross_entropy(v[0], &labels)))
    });
}

pub fn dropout_with_fixed_mask() {
    each_instance("dropout", |r| {
        let (m, n) = (dims(r, 2, 4), dims(r, 2, 4));
        let seed: u64 = r.random();
        (
            vec![u(&[m, n], r)],
            Box::new(move |t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(seed))),
        )
    });
}

pub fn layer_norm_and_cosine() {
    each_instance("layer_norm", |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 2, 5));
        (
            vec![u(&[m, n], r), u(&[n], r), u(&[n], r)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
    each_instance("cosine_similarity", |r| {
        let (m, n, d) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 2, 4));
        (vec![u(&[m, d], r), u(&[n, d], r)], Box::new(|t, v| t.cosine_similarity(v[0], v[1])))
    });
}

pub fn semi_tensor_product() {
    each_instance("stp", |r| {
        let (b, h, p, q, n) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
        (
            vec![u(&[b, h, n * p], r), u(&[b, p, q], r)],
            Box::new(move |t, v| t.stp(v[0], v[1], n)),
        )
    });
}

pub fn codec_pieces() {
    each_instance("gumbel_softmax", |r| {
        let (rows, k) = (dims(r, 1, 4), dims(r, 2, 4));
        let mut alpha = u(&[rows, k], r);
        alpha.data_mut().iter_mut().for_each(|v| *v = 0.05 + 0.45 * (v.abs()));
        let noise = codec::gumbel_noise(rows * k, r);
        (
            vec![alpha],
            Box::new(move |t, v| codec::gumbel_softmax(t, v[0], 0.5, Some(&noise))),
        )
    });
    each_instance("compose_soft", |r| {
        let cfg = CodecConfig::new(dims(r, 1, 3), 2, dims(r, 1, 3));
        let rows = dims(r, 1, 3);
        let codes = u(&[rows * cfg.m, cfg.k], r);
        let books = u(&[cfg.m * cfg.k, cfg.dim], r);
        (vec![codes, books], Box::new(move |t, v| codec::compose_soft(t, &cfg, v[0], v[1])))
    });
    each_instance("mse_loss", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        (vec![u(&s, r), u(&s, r)], Box::new(|t, v| codec::mse_loss(t, v[0], v[1])))
    });
    each_instance("mixup", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        let eta: f64 = r.random_range(0.0..1.0);
        (vec![u(&s, r), u(&s, r)], Box::new(move |t, v| codec::mixup(t, v[0], v[1], eta)))
    });
}

pub fn distillation_terms() {
    each_instance("soft_target_loss", |r| {
        let (b, v) = (dims(r, 1, 4), dims(r, 2, 5));
        (vec![u(&[b, v], r), u(&[b, v], r)], Box::new(|t, v| soft_target_loss(t, v[0], v[1])))
    });
    each_instance("rec_loss binary", |r| {
        let (b, v) = (dims(r, 1, 4), dims(r, 2, 5));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..v)).collect();
        (vec![u(&[b, v], r)], Box::new(move |t, v| backbone::rec_loss(t, v[0], &labels, RecLoss::Binary)))
    });
}

fn tiny_setup(seed: u64) -> (RecModel, Student, Vec<bool>, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = EncoderConfig::new(3, 4, 4);
    cfg.dropout = 0.0;
    let teacher = RecModel::init(&cfg, &mut rng).unwrap();
    let student = Student::init(&cfg, &CodecConfig::new(2, 2, 4), &mut rng).unwrap();
    let hot = vec![true, false, false];
    let seqs = [
        Sequence { prefix: vec![0, 1], label: 2 },
        Sequence { prefix: vec![2], label: 0 },
        Sequence { prefix: vec![1, 2, 0], label: 1 },
        Sequence { prefix: vec![0], label: 1 },
    ];
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs, &hot, 4).unwrap();
    (teacher, student, hot, batch)
}

pub fn encoder_pool_and_contrastive() {
    for seed in 0..INSTANCES {
        let (teacher, student, _, batch) = tiny_setup(seed);
        let cfg = teacher.cfg.clone();
        let enc = teacher.enc.clone();
        let senc = student.enc.clone();
        let proj = student.proj.clone();
        let b = batch.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the tables are the inputs; the encoders are fixed constants
        let build = move |t: &mut Tape, v: &[Var]| {
            let pt = enc.bind(t, false);
            let ps = senc.bind(t, false);
            let pj = proj.bind(t, false);
            let rt = backbone::encode(t, &cfg, &pt, v[0], &b, None)?;
            let rs = backbone::encode(t, &cfg, &ps, v[1], &b, None)?;
            let ht = hot_cold_representations(t, &pt, rt, &b)?;
            let hs = hot_cold_representations(t, &ps, rs, &b)?;
            let (zt, zs) = recombine(t, &ht, &hs)?;
            contrastive_loss(t, zt, zs, &pj, 0.5)
        };
        gradcheck(
            &format!("encode+pool+contrastive #{seed}"),
            vec![teacher.table.clone(), u(&[3, 4], &mut rng)],
            &mut rng,
            &build,
        );
    }
}

pub fn total_loss_end_to_end_three_items() {
    let (teacher, student, _, batch) = tiny_setup(11);
    let dc = DistillConfig { beta: 0.5, ..DistillConfig::default() };
    let weights = LossWeights::joint(&dc);
    let all = Trainable { teacher: true, student: true };

    let mut tape = Tape::new();
    let v = JointVars::bind(&mut tape, &teacher, &student, all);
    let (loss, terms) = total_loss(&mut tape, &teacher.cfg, &student.codec_cfg, &v, &batch, &weights, None).unwrap();
    assert!(terms.con > 0.0 && terms.soft > 0.0 && terms.rec_tea > 0.0);
    let grads = tape.backward(loss).unwrap();
    let mut vars = vec![v.table];
    vars.extend(v.tea.vars());
    vars.extend(v.stu.vars());
    vars.extend(v.codec.vars());
    vars.extend(v.proj.vars());

    fn tensors<'a>(t: &'a mut RecModel, s: &'a mut Student) -> Vec<&'a mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut t.table];
        out.extend(t.enc.tensors_mut());
        out.extend(s.enc.tensors_mut());
        out.extend(s.codec.tensors_mut());
        out.extend(s.proj.tensors_mut());
        out
    }
    let eval = |t: &RecModel, s: &Student| {
        let mut tape = Tape::new();
        let v = JointVars::bind(&mut tape, t, s, all);
        total_loss(&mut tape, &t.cfg, &s.codec_cfg, &v, &batch, &weights, None).unwrap().1.total
    };

    let (mut t0, mut s0) = (teacher.clone(), student.clone());
    let sizes: Vec<usize> = tensors(&mut t0, &mut s0).iter().map(|t| t.numel()).collect();
    assert_eq!(sizes.len(), vars.len());
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        analytic.extend_from_slice(grads.tensor(vars[k]).data());
        for j in 0..size {
            let f = |delta: f64| {
                let (mut t, mut s) = (teacher.clone(), student.clone());
                tensors(&mut t, &mut s)[k].data_mut()[j] += delta;
                eval(&t, &s)
            };
            numeric.push((f(STEP) - f(-STEP)) / (2.0 * STEP));
        }
    }
    let err = relative_error(&analytic, &numeric);
    println!("total_loss: {} parameters, relative error {err:e}", analytic.len());
    assert!(err < TOL, "total_loss relative error {err:e}");
}

#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("matmul_and_bmm", matmul_and_bmm),
    ("shape_ops", shape_ops),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions", reductions),
    ("softmax_family", softmax_family),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("layer_norm_and_cosine", layer_norm_and_cosine),
    ("semi_tensor_product", semi_tensor_product),
    ("codec_pieces", codec_pieces),
    ("distillation_terms", distillation_terms),
    ("encoder_pool_and_contrastive", encoder_pool_and_contrastive),
    ("total_loss_end_to_end_three_items", total_loss_end_to_end_three_items),
];

//! Reverse-mode automatic differentiation over a linear operation record.

use std::rc::Rc;

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    Softmax(Var, f64),
    MaskedSoftmax(Var),
    Dropout(Var, Rc<Vec<f64>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
    Stp(Var, Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Inputs always precede the
/// operations that consume them, so a single reverse sweep computes
/// gradients. The record supports exactly one [`Tape::backward`] call; use
/// [`Tape::reset`] to reuse the allocation for a fresh forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only leaves keep their gradient; intermediate buffers are released during
/// the sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so it can hold a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B, m, k] × [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                kernels::matmul_nn(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![bt, m, n], out)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a row vector to every row (the only broadcast supported).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        let c = *sx.last().unwrap_or(&0);
        if sr.iter().product::<usize>() != c || sr.last() != Some(&c) {
            return Err(Error::dim("add_row", &sx, &sr));
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over the last dimension.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).expect("sum_last"), Op::SumLast(x), rg)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, end)` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of last dimension {c}"
            )));
        }
        let data = t
            .data()
            .chunks(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceLast(x, start), rg))
    }

    /// Row lookup; the backward pass scatters additively into `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows needs a matrix, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index { index: i, bound: r });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out)?,
            Op::GatherRows(table, Rc::new(indices.to_vec())),
            rg,
        ))
    }

    /// Softmax of `x / temperature` over the last dimension.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let mut value = self.value(x).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row, temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, temperature), rg))
    }

    /// Softmax over the last dimension restricted to entries where `mask` is
    /// true. Masked entries are 0; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let mut value = self.value(x).clone();
        if mask.len() != value.numel() {
            return Err(Error::dim("masked_softmax", value.shape(), &[mask.len()]));
        }
        let c = value.cols();
        for (row, m) in value.data_mut().chunks_mut(c).zip(mask.chunks(c)) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for (v, &k) in row.iter_mut().zip(m) {
                *v = if k { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Callers skip it at evaluation.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout(x, Rc::new(mask)), rg))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (
            self.value(gain).data().to_vec(),
            self.value(bias).data().to_vec(),
        );
        let src = self.value(x);
        let rows = src.rows();
        let mut xhat = vec![0.0; src.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.numel()];
        for r in 0..rows {
            let row = &src.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Pairwise cosine similarity `[m, d] × [n, d] -> [m, n]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("cosine_similarity", &sa, &sb));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let norm = |v: &[f64]| kernels::dot(v, v).sqrt().max(1e-12);
        let a_norm: Vec<f64> = da.chunks(d).map(norm).collect();
        let b_norm: Vec<f64> = db.chunks(d).map(norm).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = kernels::dot(&da[i * d..(i + 1) * d], &db[j * d..(j + 1) * d])
                    / (a_norm[i] * b_norm[j]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Cosine {
                a,
                b,
                a_norm,
                b_norm,
            },
            rg,
        ))
    }

    /// Mean categorical cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            if y >= c {
                return Err(Error::Index { index: y, bound: c });
            }
            kernels::softmax_in_place(row, 1.0);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
            rg,
        ))
    }

    /// Batched left semi-tensor product `[B, h, n·p] ⋉ [B, p, q] -> [B, h, n·q]`.
    pub fn stp(&mut self, a: Var, b: Var, n: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if n == 0 || sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != n * sb[1] {
            return Err(Error::Shape(format!(
                "stp with n={n} needs [B, h, n·p] ⋉ [B, p, q]; got {sa:?} and {sb:?}"
            )));
        }
        let (bt, h, p, q) = (sa[0], sa[1], sb[1], sb[2]);
        let mut out = vec![0.0; bt * h * n * q];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                kernels::stp(
                    &da[i * h * n * p..(i + 1) * h * n * p],
                    &db[i * p * q..(i + 1) * p * q],
                    h,
                    p,
                    q,
                    n,
                    &mut out[i * h * n * q..(i + 1) * h * n * q],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bt, h, n * q], out)?, Op::Stp(a, b, n), rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by a backward pass; reset it first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                self.accumulate(grads, *a, |ga| {
                    kernels::matmul_nt_acc(g, val(*b), m, n, k, ga)
                });
                self.accumulate(grads, *b, |gb| {
                    kernels::matmul_tn_acc(val(*a), g, m, k, n, gb)
                });
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bt {
                        kernels::matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &val(*b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bt {
                        kernels::matmul_tn_acc(
                            &val(*a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                self.accumulate(grads, *x, |gx| {
                    for b in 0..batch {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
                });
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *row, |gr| {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
            }),
            Op::AddScalar(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::Tanh(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Softplus(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += gv * sigmoid(*xv);
                }
            }),
            Op::Relu(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }),
            Op::Log(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += gv / xv;
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y;
                }
            }),
            Op::Clamp(x, lo, hi) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv >= *lo && *xv <= *hi {
                        *o += gv;
                    }
                }
            }),
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => self.accumulate(grads, *x, |gx| {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|o| *o += s)
            }),
            Op::SumLast(x) => self.accumulate(grads, *x, |gx| {
                let c = gx.len() / g.len();
                for (chunk, gv) in gx.chunks_mut(c).zip(g) {
                    chunk.iter_mut().for_each(|o| *o += gv);
                }
            }),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast(x, start) => {
                let c = self.nodes[x.0].value.cols();
                let w = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], chunk);
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let c = node.value.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Softmax(x, t) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gr), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s = kernels::dot(gr, y);
                        for j in 0..c {
                            o[j] += y[j] * (gr[j] - s) / t;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gr), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s = kernels::dot(gr, y);
                        for j in 0..c {
                            o[j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => self.accumulate(grads, *x, |gx| {
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask.iter()) {
                    *o += gv * m;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gamma = val(*gain);
                self.accumulate(grads, *x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gamma[j];
                            sum_d += d;
                            sum_dh += d * h[j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            let d = gr[j] * gamma[j];
                            gx[r * c + j] += is / cf * (cf * d - sum_d - h[j] * sum_dh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * h[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                a_norm,
                b_norm,
            } => {
                let d = self.nodes[a.0].value.cols();
                let (m, n) = (a_norm.len(), b_norm.len());
                let (da, db) = (val(*a), val(*b));
                // ∂cos/∂a_i = b_j/(|a||b|) - cos · a_i/|a|²
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let ai = &da[i * d..(i + 1) * d];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let bj = &db[j * d..(j + 1) * d];
                            let cos = out[i * n + j];
                            let inv = 1.0 / (a_norm[i] * b_norm[j]);
                            let ca = cos / (a_norm[i] * a_norm[i]);
                            for t in 0..d {
                                ga[i * d + t] += gv * (bj[t] * inv - ca * ai[t]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let ai = &da[i * d..(i + 1) * d];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let bj = &db[j * d..(j + 1) * d];
                            let cos = out[i * n + j];
                            let inv = 1.0 / (a_norm[i] * b_norm[j]);
                            let cb = cos / (b_norm[j] * b_norm[j]);
                            for t in 0..d {
                                gb[j * d + t] += gv * (ai[t] * inv - cb * bj[t]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let s = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Stp(a, b, n) => {
                let n = *n;
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, h, p, q) = (sa[0], sa[1], sb[1], sb[2]);
                let (da, db) = (val(*a), val(*b));
                // C[r, s·n + t] = Σ_i A[r, i·n + t] · B[i, s]
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..bt {
                        let gblk = &g[bi * h * n * q..(bi + 1) * h * n * q];
                        let bblk = &db[bi * p * q..(bi + 1) * p * q];
                        let gablk = &mut ga[bi * h * n * p..(bi + 1) * h * n * p];
                        for r in 0..h {
                            for i in 0..p {
                                for s in 0..q {
                                    let bis = bblk[i * q + s];
                                    for t in 0..n {
                                        gablk[r * n * p + i * n + t] +=
                                            gblk[r * n * q + s * n + t] * bis;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..bt {
                        let gblk = &g[bi * h * n * q..(bi + 1) * h * n * q];
                        let ablk = &da[bi * h * n * p..(bi + 1) * h * n * p];
                        let gbblk = &mut gb[bi * p * q..(bi + 1) * p * q];
                        for r in 0..h {
                            for i in 0..p {
                                let seg = &ablk[r * n * p + i * n..r * n * p + (i + 1) * n];
                                for s in 0..q {
                                    gbblk[i * q + s] += kernels::dot(
                                        seg,
                                        &gblk[r * n * q + s * n..r * n * q + (s + 1) * n],
                                    );
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

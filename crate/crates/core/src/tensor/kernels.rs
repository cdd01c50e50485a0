//! Row-major dense kernels shared by the tape and the frozen inference path.

use super::Real;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out[i, :] += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], out: &mut [F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`; accumulation over `k` runs in index order.
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    out[..m * n].iter_mut().for_each(|v| *v = F::zero());
    matmul_nn_acc(a, b, m, k, n, out);
}

/// `out (m×n) += a (m×k) · b (k×n)`
pub fn matmul_nn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            axpy(aip, b_row, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// In-place softmax of `row / temperature`, stabilized by subtracting the row max.
pub fn softmax_in_place<F: Real>(row: &mut [F], temperature: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Left semi-tensor product `a (h × n·p) ⋉ b (p × q) -> h × n·q`.
///
/// Block `(r, s)` of the output is `Σ_i a[r, i·n..(i+1)·n] · b[i, s]`, which is
/// `a · (b ⊗ I_n)`.
pub fn stp<F: Real>(a: &[F], b: &[F], h: usize, p: usize, q: usize, n: usize, out: &mut [F]) {
    let a_cols = n * p;
    let out_cols = n * q;
    out[..h * out_cols].iter_mut().for_each(|v| *v = F::zero());
    for r in 0..h {
        let a_row = &a[r * a_cols..(r + 1) * a_cols];
        let out_row = &mut out[r * out_cols..(r + 1) * out_cols];
        for i in 0..p {
            let seg = &a_row[i * n..(i + 1) * n];
            let b_row = &b[i * q..(i + 1) * q];
            for (s, &bis) in b_row.iter().enumerate() {
                axpy(bis, seg, &mut out_row[s * n..(s + 1) * n]);
            }
        }
    }
}

//! Tensor-train (TT) and semi-tensor-product TT (STTD) embedding tables.
//!
//! Row `i` of the `|V| × N` table is indexed by the mixed-radix digits
//! `(i_1..i_d)` of `i` over `(I_1..I_d)` (row-major, `i_d` fastest); the `N`
//! outputs are laid out row-major over `(j_1..j_d)` with `N = Π J_k`.
//!
//! Core layouts (all row-major):
//!
//! * first `Ĝ_1`: `[I_1·J_1, R]`, row `i_1·J_1 + j_1`;
//! * middle `Ĝ_k`: `[R/n, I_k·J_k/n, R]`, middle index `i_k·(J_k/n) + j'`;
//! * last `Ĝ_d`: `[R/n, I_d·J_d/n]`, column `i_d·(J_d/n) + j'`.
//!
//! Slicing a middle core at `i_k` gives a `(R/n) × (J_k/n·R)` matrix `B`
//! whose column `j'·R + r` feeds output rank `r` of the sub-block `j'`.
//! Chaining `A ⋉ B` for an `H × R` prefix `A` yields column
//! `(j'·R + r)·n + t`, which is regrouped into row `h·J_k + j'·n + t`,
//! column `r`: so `j_k = j'·n + t`. With `n = 1` every step is an ordinary
//! matrix product and the cores are the standard TT cores.

mod fit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor};

pub use fit::{fit_cores, FitConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTConfig {
    pub i_dims: Vec<usize>,
    pub j_dims: Vec<usize>,
    pub rank: usize,
    /// STP block factor; 1 is plain TT.
    pub n: usize,
}

impl TTConfig {
    pub fn d(&self) -> usize {
        self.i_dims.len()
    }

    pub fn rows(&self) -> usize {
        self.i_dims.iter().product()
    }

    pub fn dim(&self) -> usize {
        self.j_dims.iter().product()
    }

    /// Checks shapes against a `num_items × dim` table.
    pub fn validate(&self, num_items: usize, dim: usize) -> Result<()> {
        let d = self.d();
        if d == 0 || self.j_dims.len() != d {
            return Err(Error::Parameter(format!(
                "need matching non-empty I and J factor lists, got {} and {}",
                d,
                self.j_dims.len()
            )));
        }
        if self.i_dims.iter().chain(&self.j_dims).any(|&x| x == 0) || self.rank == 0 || self.n == 0 {
            return Err(Error::Parameter("factor shapes, rank and n must be positive".into()));
        }
        if self.dim() != dim {
            return Err(Error::Parameter(format!(
                "Π J_k = {} but N = {dim}",
                self.dim()
            )));
        }
        if self.rows() < num_items {
            return Err(Error::Parameter(format!(
                "Π I_k = {} is smaller than |V| = {num_items}",
                self.rows()
            )));
        }
        if d > 1 {
            if self.rank % self.n != 0 {
                return Err(Error::Shape(format!(
                    "n = {} does not divide R = {}",
                    self.n, self.rank
                )));
            }
            if let Some(j) = self.j_dims[1..].iter().find(|&&j| j % self.n != 0) {
                return Err(Error::Shape(format!("n = {} does not divide J_k = {j}", self.n)));
            }
        }
        Ok(())
    }

    /// Core shapes in order.
    pub fn core_shapes(&self) -> Vec<Vec<usize>> {
        let (d, r, n) = (self.d(), self.rank, self.n);
        (0..d)
            .map(|k| {
                let ij = self.i_dims[k] * self.j_dims[k];
                if d == 1 {
                    vec![ij, 1]
                } else if k == 0 {
                    vec![ij, r]
                } else if k + 1 < d {
                    vec![r / n, ij / n, r]
                } else {
                    vec![r / n, ij / n]
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.core_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Near-balanced factors for a `num_items × dim` table: the smallest
    /// `I_k` (front first) whose product still covers `|V|`, and the `J`
    /// factorization of `N` with the smallest largest factor that respects
    /// `n | J_k` for `k ≥ 2`.
    pub fn balanced(num_items: usize, dim: usize, d: usize, rank: usize, n: usize) -> Result<Self> {
        if d == 0 || num_items == 0 || dim == 0 {
            return Err(Error::Parameter("need d, |V| and N >= 1".into()));
        }
        let root = (num_items as f64).powf(1.0 / d as f64).ceil() as usize;
        let mut i_dims = vec![root.max(1); d];
        while i_dims.iter().product::<usize>() < num_items {
            i_dims[d - 1] += 1;
        }
        for k in 0..d {
            while i_dims[k] > 1 {
                i_dims[k] -= 1;
                if i_dims.iter().product::<usize>() < num_items {
                    i_dims[k] += 1;
                    break;
                }
            }
        }
        let mut best: Option<Vec<usize>> = None;
        let mut stack = vec![(Vec::new(), dim)];
        while let Some((prefix, rest)) = stack.pop() {
            if prefix.len() + 1 == d {
                let mut j = prefix;
                j.push(rest);
                if j[1..].iter().any(|&x| x % n != 0) {
                    continue;
                }
                let key = |v: &[usize]| (*v.iter().max().unwrap(), v.iter().map(|x| x * x).sum::<usize>(), v.to_vec());
                if best.as_ref().is_none_or(|b| key(&j) < key(b)) {
                    best = Some(j);
                }
                continue;
            }
            for f in (1..=rest).filter(|f| rest % f == 0) {
                let mut p = prefix.clone();
                p.push(f);
                stack.push((p, rest / f));
            }
        }
        let j_dims = best.ok_or_else(|| {
            Error::Config(format!("N = {dim} has no {d}-factor split with n = {n} dividing J_2..J_d"))
        })?;
        let cfg = TTConfig { i_dims, j_dims, rank, n };
        cfg.validate(num_items, dim)?;
        Ok(cfg)
    }
}

/// Which summation range to use for the middle-core term of the rate formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateFormula {
    /// `Σ_{k=1}^{d−1}`, which also counts the first core inside the sum.
    Printed,
    /// `Σ_{k=2}^{d−1}`: the exact parameter count of the cores.
    Corrected,
}

/// `Π I_k J_k / (I_1J_1R + Σ_k I_kJ_kR²/n² + I_dJ_dR/n²)`.
pub fn sttd_rate(cfg: &TTConfig, formula: RateFormula) -> f64 {
    let d = cfg.d();
    let (r, n) = (cfg.rank as f64, cfg.n as f64);
    let ij = |k: usize| (cfg.i_dims[k] * cfg.j_dims[k]) as f64;
    let full: f64 = (0..d).map(ij).product();
    let start = match formula {
        RateFormula::Printed => 0,
        RateFormula::Corrected => 1,
    };
    let middle: f64 = (start..d.saturating_sub(1)).map(|k| ij(k) * r * r / (n * n)).sum();
    full / (ij(0) * r + middle + ij(d - 1) * r / (n * n))
}

/// Mixed-radix digits of `i`, most significant first.
pub fn index_factorize(i: usize, dims: &[usize]) -> Result<Vec<usize>> {
    let total: usize = dims.iter().product();
    if i >= total {
        return Err(Error::Index { index: i, bound: total });
    }
    let mut out = vec![0; dims.len()];
    let mut rest = i;
    for (k, &dk) in dims.iter().enumerate().rev() {
        out[k] = rest % dk;
        rest /= dk;
    }
    Ok(out)
}

pub fn index_recompose(digits: &[usize], dims: &[usize]) -> usize {
    digits.iter().zip(dims).fold(0, |acc, (&ik, &dk)| acc * dk + ik)
}

/// Frozen cores in the documented layout, converted to `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cores<F: Real> {
    pub config: TTConfig,
    pub cores: Vec<Vec<F>>,
}

/// Reusable buffers for [`Cores::gather_row`].
#[derive(Clone, Debug, Default)]
pub struct Workspace<F> {
    a: Vec<F>,
    b: Vec<F>,
    out: Vec<F>,
    digits: Vec<usize>,
}

impl<F: Real> Cores<F> {
    pub fn new(config: TTConfig, cores: Vec<Vec<F>>) -> Result<Self> {
        let shapes = config.core_shapes();
        if cores.len() != shapes.len() {
            return Err(Error::dim("cores", &[cores.len()], &[shapes.len()]));
        }
        for (c, s) in cores.iter().zip(&shapes) {
            if c.len() != s.iter().product::<usize>() {
                return Err(Error::dim("core", &[c.len()], s));
            }
        }
        Ok(Cores { config, cores })
    }

    pub fn zeros(config: TTConfig) -> Self {
        let cores = config
            .core_shapes()
            .iter()
            .map(|s| vec![F::zero(); s.iter().product()])
            .collect();
        Cores { config, cores }
    }

    pub fn from_tensors(config: TTConfig, cores: &[Tensor]) -> Result<Self> {
        let shapes = config.core_shapes();
        for (t, s) in cores.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::dim("core", t.shape(), s));
            }
        }
        let conv = cores
            .iter()
            .map(|t| t.data().iter().map(|&v| F::from_f64(v)).collect())
            .collect();
        Cores::new(config, conv)
    }

    /// Reconstructs row `i` into `out` (length `N`).
    pub fn gather_row(&self, i: usize, ws: &mut Workspace<F>, out: &mut [F]) -> Result<()> {
        let cfg = &self.config;
        let (d, r, n) = (cfg.d(), cfg.rank, cfg.n);
        let rows = cfg.rows();
        if i >= rows {
            return Err(Error::Index { index: i, bound: rows });
        }
        ws.digits.resize(d, 0);
        let mut rest = i;
        for k in (0..d).rev() {
            ws.digits[k] = rest % cfg.i_dims[k];
            rest /= cfg.i_dims[k];
        }
        let j1 = cfg.j_dims[0];
        if d == 1 {
            out.copy_from_slice(&self.cores[0][ws.digits[0] * j1..(ws.digits[0] + 1) * j1]);
            return Ok(());
        }
        // prefix A: H × R, H = J_1 … J_k
        ws.a.clear();
        ws.a.extend_from_slice(&self.cores[0][ws.digits[0] * j1 * r..(ws.digits[0] + 1) * j1 * r]);
        let mut h = j1;
        let p = r / n;
        for k in 1..d {
            let jk = cfg.j_dims[k];
            let jn = jk / n;
            let ik = ws.digits[k];
            let core = &self.cores[k];
            if k + 1 < d {
                // slice B: p × (jn·R)
                let q = jn * r;
                let stride = cfg.i_dims[k] * jn * r;
                ws.b.clear();
                for row in 0..p {
                    let s = row * stride + ik * q;
                    ws.b.extend_from_slice(&core[s..s + q]);
                }
                ws.out.resize(h * n * q, F::zero());
                kernels::stp(&ws.a, &ws.b, h, p, q, n, &mut ws.out);
                // regroup (h, j', r, t) -> (h, j', t, r)
                ws.a.resize(h * jk * r, F::zero());
                for hh in 0..h {
                    for jp in 0..jn {
                        for ro in 0..r {
                            let src = hh * n * q + (jp * r + ro) * n;
                            for t in 0..n {
                                ws.a[((hh * jk) + jp * n + t) * r + ro] = ws.out[src + t];
                            }
                        }
                    }
                }
                h *= jk;
            } else {
                let stride = cfg.i_dims[k] * jn;
                ws.b.clear();
                for row in 0..p {
                    let s = row * stride + ik * jn;
                    ws.b.extend_from_slice(&core[s..s + jn]);
                }
                kernels::stp(&ws.a, &ws.b, h, p, jn, n, out);
            }
        }
        Ok(())
    }

    /// Reconstructs `indices` into `out` (`len × N`).
    pub fn gather_rows(&self, indices: &[usize], out: &mut [F]) -> Result<()> {
        let dim = self.config.dim();
        let mut ws = Workspace::default();
        for (r, &i) in indices.iter().enumerate() {
            self.gather_row(i, &mut ws, &mut out[r * dim..(r + 1) * dim])?;
        }
        Ok(())
    }

    /// The first `num_items` rows.
    pub fn reconstruct_all(&self, num_items: usize, out: &mut [F]) -> Result<()> {
        let dim = self.config.dim();
        if out.len() != num_items * dim {
            return Err(Error::dim("reconstruct_all", &[out.len()], &[num_items, dim]));
        }
        let mut ws = Workspace::default();
        for (i, row) in out.chunks_exact_mut(dim).enumerate() {
            self.gather_row(i, &mut ws, row)?;
        }
        Ok(())
    }
}

/// Row `i` of an STTD table.
pub fn sttd_gather_row<F: Real>(i: usize, cores: &Cores<F>) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); cores.config.dim()];
    cores.gather_row(i, &mut Workspace::default(), &mut out)?;
    Ok(out)
}

/// Row `i` of a TT table (the `n = 1` case).
pub fn tt_gather_row<F: Real>(i: usize, cores: &Cores<F>) -> Result<Vec<F>> {
    if cores.config.n != 1 {
        return Err(Error::Parameter(format!(
            "TT cores need n = 1, got {}",
            cores.config.n
        )));
    }
    sttd_gather_row(i, cores)
}

/// Stores cores as `core{k}` tensors with the config under `tt_config`.
pub fn to_checkpoint(cores: &Cores<f64>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::json!({ "tt_config": cores.config }));
    for (k, (c, s)) in cores.cores.iter().zip(cores.config.core_shapes()).enumerate() {
        ck.insert(format!("core{k}"), Tensor::new(s, c.clone())?);
    }
    Ok(ck)
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<Cores<f64>> {
    let config: TTConfig = serde_json::from_value(
        ck.config
            .get("tt_config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no tt_config".into()))?,
    )?;
    let tensors = (0..config.d())
        .map(|k| ck.get(&format!("core{k}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    Cores::from_tensors(config, &tensors)
}

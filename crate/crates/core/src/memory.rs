//! Memory enhancement module: a bank of unit-norm normality prototypes with a
//! softmax read, a nearest-assignment update, and nearest-item queries.
//!
//! Similarities are cosines: features are L2-normalized before the dot
//! product with the (already unit-norm) items.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NORM_EPS;
use crate::tensor::{gemm, Tensor};

/// Row norms of a valid bank are 1 within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    items: Tensor,
}

/// Output of [`MemoryBank::read`] for `K` features against `M` items.
#[derive(Debug, Clone)]
pub struct ReadResult {
    /// `K×C` retrieved features.
    pub q_hat: Tensor,
    /// `K×M` read weights (row-softmax of `similarity`).
    pub weights: Tensor,
    /// `K×M` cosine similarities.
    pub similarity: Tensor,
}

pub(crate) struct ReadKernel {
    pub normalized: Vec<f64>,
    pub norms: Vec<f64>,
    pub similarity: Vec<f64>,
    pub weights: Vec<f64>,
    pub read: Vec<f64>,
}

/// Normalizes `k` rows of width `c` in place, returning the clamped norms.
pub(crate) fn normalize_rows(rows: &mut [f64], c: usize) -> Vec<f64> {
    rows.chunks_exact_mut(c)
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            n
        })
        .collect()
}

fn softmax_in_place(xs: &mut [f64]) {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn read_kernel(q: &[f64], items: &[f64], k: usize, m: usize, c: usize) -> ReadKernel {
    let mut normalized = q.to_vec();
    let norms = normalize_rows(&mut normalized, c);
    let mut similarity = vec![0.0; k * m];
    gemm(k, c, m, 1.0, &normalized, false, items, true, 0.0, &mut similarity);
    let mut weights = similarity.clone();
    for row in weights.chunks_exact_mut(m) {
        softmax_in_place(row);
    }
    let mut read = vec![0.0; k * c];
    gemm(k, m, c, 1.0, &weights, false, items, false, 0.0, &mut read);
    ReadKernel {
        normalized,
        norms,
        similarity,
        weights,
        read,
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MemoryBank {
    /// `m` items drawn from an isotropic Gaussian and projected to the unit sphere.
    pub fn init(m: usize, c: usize, seed: u64) -> Result<Self> {
        if m < 3 {
            return Err(Error::Config(format!(
                "memory needs at least 3 items, got {m}"
            )));
        }
        if c == 0 {
            return Err(Error::Config("memory feature dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..m * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize_rows(&mut data, c);
        Ok(Self {
            items: Tensor::new(vec![m, c], data)?,
        })
    }

    /// Wraps an explicit `M×C` item matrix whose rows must already be unit norm.
    pub fn from_items(items: Tensor) -> Result<Self> {
        let [m, c] = items.dims2()?;
        if m == 0 || c == 0 {
            return Err(Error::Config("memory bank must be non-empty".into()));
        }
        for (i, row) in items.data().chunks_exact(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "memory item {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    pub fn item(&self, m: usize) -> &[f64] {
        let c = self.dim();
        &self.items.data()[m * c..(m + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.shape()[1]
    }

    fn check_features(&self, q: &Tensor) -> Result<usize> {
        let [k, c] = q.dims2()?;
        if c != self.dim() {
            return Err(Error::Shape(format!(
                "features have dimension {c}, memory has {}",
                self.dim()
            )));
        }
        if !q.all_finite() {
            return Err(Error::InvalidInput("non-finite memory query".into()));
        }
        Ok(k)
    }

    pub fn read(&self, q: &Tensor) -> Result<ReadResult> {
        let k = self.check_features(q)?;
        let (m, c) = (self.len(), self.dim());
        let r = read_kernel(q.data(), self.items.data(), k, m, c);
        Ok(ReadResult {
            q_hat: Tensor::new(vec![k, c], r.read)?,
            weights: Tensor::new(vec![k, m], r.weights)?,
            similarity: Tensor::new(vec![k, m], r.similarity)?,
        })
    }

    /// The updated bank after absorbing the `K×C` features `q`.
    ///
    /// Each feature is assigned to its most similar item. Per item, the
    /// column-softmax weights of its assigned features are renormalized to sum
    /// to one, the weighted feature sum is added to the item, and the result is
    /// projected back to unit norm. Items with no assigned feature are kept.
    pub fn updated(&self, q: &Tensor) -> Result<MemoryBank> {
        let k = self.check_features(q)?;
        let (m, c) = (self.len(), self.dim());
        if k == 0 {
            return Ok(self.clone());
        }
        let mut qn = q.data().to_vec();
        normalize_rows(&mut qn, c);
        let mut sim = vec![0.0; k * m];
        gemm(k, c, m, 1.0, &qn, false, self.items.data(), true, 0.0, &mut sim);

        // column softmax over the K features
        let mut col_max = vec![f64::NEG_INFINITY; m];
        for row in sim.chunks_exact(m) {
            for (mx, &v) in col_max.iter_mut().zip(row) {
                *mx = mx.max(v);
            }
        }
        let mut v = vec![0.0; k * m];
        let mut col_sum = vec![0.0; m];
        for (vrow, srow) in v.chunks_exact_mut(m).zip(sim.chunks_exact(m)) {
            for j in 0..m {
                vrow[j] = (srow[j] - col_max[j]).exp();
                col_sum[j] += vrow[j];
            }
        }
        for vrow in v.chunks_exact_mut(m) {
            for j in 0..m {
                vrow[j] /= col_sum[j];
            }
        }

        let assign: Vec<usize> = sim.chunks_exact(m).map(argmax).collect();
        let mut mass = vec![0.0; m];
        for (kk, &a) in assign.iter().enumerate() {
            mass[a] += v[kk * m + a];
        }
        let mut acc = vec![0.0; m * c];
        for (kk, &a) in assign.iter().enumerate() {
            let w = v[kk * m + a] / mass[a];
            let dst = &mut acc[a * c..(a + 1) * c];
            for (d, x) in dst.iter_mut().zip(&q.data()[kk * c..(kk + 1) * c]) {
                *d += w * x;
            }
        }
        let mut items = self.items.data().to_vec();
        for j in 0..m {
            if mass[j] == 0.0 {
                continue;
            }
            let row = &mut items[j * c..(j + 1) * c];
            for (p, a) in row.iter_mut().zip(&acc[j * c..(j + 1) * c]) {
                *p += a;
            }
            normalize_rows(row, c);
        }
        Ok(MemoryBank {
            items: Tensor::new(vec![m, c], items)?,
        })
    }

    pub fn update(&mut self, q: &Tensor) -> Result<()> {
        *self = self.updated(q)?;
        Ok(())
    }

    /// Per feature, the indices of the `n` most similar items in decreasing
    /// cosine order (ties broken by lower index).
    pub fn nearest_items(&self, q: &Tensor, n: usize) -> Result<Vec<Vec<usize>>> {
        let k = self.check_features(q)?;
        let (m, c) = (self.len(), self.dim());
        if n > m {
            return Err(Error::InvalidInput(format!(
                "asked for {n} nearest items from a bank of {m}"
            )));
        }
        let mut qn = q.data().to_vec();
        normalize_rows(&mut qn, c);
        let mut sim = vec![0.0; k * m];
        gemm(k, c, m, 1.0, &qn, false, self.items.data(), true, 0.0, &mut sim);
        Ok(sim.chunks_exact(m).map(|row| top_n(row, n)).collect())
    }
}

/// Indices of the `n` largest entries, descending, lower index first on ties.
pub(crate) fn top_n(row: &[f64], n: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(n + 1);
    for (i, &v) in row.iter().enumerate() {
        let pos = best.iter().position(|&b| v > row[b]).unwrap_or(best.len());
        if pos < n {
            best.insert(pos, i);
            best.truncate(n);
        }
    }
    best
}

//! Training objective: per-stream prediction loss, feature discretization
//! loss against the memory items, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{self, MemoryBank};
use crate::tensor::{gemm, Tensor};

/// Reduction applied to the squared prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Mean over elements (resolution independent).
    Mean,
    /// Plain squared L2 norm.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub beta_s: f64,
    pub gamma_i: f64,
    /// Margin between nearest and second-nearest item distances.
    pub a: f64,
    /// Margin between nearest-item distance and the second/third item gap.
    pub b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 0.1,
            beta_s: 0.1,
            gamma_i: 0.5,
            a: 2.0,
            b: 1.0,
        }
    }
}

impl LossWeights {
    pub fn gamma_x(&self) -> f64 {
        1.0 - self.gamma_i
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma_i) {
            return Err(Error::Config(format!(
                "gamma_i must lie in [0, 1], got {}",
                self.gamma_i
            )));
        }
        if self.a < 0.0 || self.b < 0.0 {
            return Err(Error::Config("margins a and b must be >= 0".into()));
        }
        if !(self.alpha_s.is_finite() && self.beta_s.is_finite()) {
            return Err(Error::Config("alpha_s/beta_s must be finite".into()));
        }
        Ok(())
    }
}

/// Shape of the discretization loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationParams {
    pub a: f64,
    pub b: f64,
    /// Clamp each term at zero.
    pub hinge: bool,
    /// Square the item-gap norm in the second term too.
    pub square_gap: bool,
}

impl DiscretizationParams {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            a: w.a,
            b: w.b,
            hinge: true,
            square_gap: false,
        }
    }
}

/// Per-feature bookkeeping of the discretization loss, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HingeRow {
    pub nearest: usize,
    pub second: usize,
    pub margin_active: bool,
    pub separation_active: bool,
}

pub fn prediction_loss(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(match reduction {
        Reduction::Mean => s / pred.len() as f64,
        Reduction::Sum => s,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Loss value and per-row terms for features laid out as rows of width `C`.
pub(crate) fn discretization_terms(
    q: &[f64],
    bank: &MemoryBank,
    params: &DiscretizationParams,
) -> Result<(f64, Vec<HingeRow>)> {
    let (m, c) = (bank.len(), bank.dim());
    if m < 3 {
        return Err(Error::Config(format!(
            "discretization loss needs at least 3 memory items, got {m}"
        )));
    }
    if !q.len().is_multiple_of(c) {
        return Err(Error::Shape(format!(
            "feature buffer of {} values is not a multiple of {c}",
            q.len()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite features".into()));
    }
    let k = q.len() / c;
    if k == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut qn = q.to_vec();
    memory::normalize_rows(&mut qn, c);
    let mut sim = vec![0.0; k * m];
    gemm(k, c, m, 1.0, &qn, false, bank.items().data(), true, 0.0, &mut sim);

    let clamp = |x: f64| if params.hinge { x.max(0.0) } else { x };
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(k);
    for (row, srow) in q.chunks_exact(c).zip(sim.chunks_exact(m)) {
        let idx = memory::top_n(srow, 3);
        let (pp, pn1, pn2) = (bank.item(idx[0]), bank.item(idx[1]), bank.item(idx[2]));
        let d_near = sq_dist(row, pp);
        let d_second = sq_dist(row, pn1);
        let gap = if params.square_gap {
            sq_dist(pn2, pn1)
        } else {
            sq_dist(pn2, pn1).sqrt()
        };
        let t1 = d_near - d_second + params.a;
        let t2 = d_near - gap + params.b;
        total += clamp(t1) + clamp(t2);
        rows.push(HingeRow {
            nearest: idx[0],
            second: idx[1],
            margin_active: !params.hinge || t1 > 0.0,
            separation_active: !params.hinge || t2 > 0.0,
        });
    }
    Ok((total / k as f64, rows))
}

/// Mean over the `K` features (rows of `features`) of the margin terms
/// pulling each feature to its nearest item and pushing it away from the
/// second nearest, relative to the second/third item gap.
pub fn discretization_loss(
    features: &Tensor,
    bank: &MemoryBank,
    params: &DiscretizationParams,
) -> Result<f64> {
    let [_, c] = features.dims2()?;
    if c != bank.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {c}, memory has {}",
            bank.dim()
        )));
    }
    discretization_terms(features.data(), bank, params).map(|(l, _)| l)
}

/// Graph node for [`discretization_loss`] over every vector on the last axis of `q`.
pub fn discretization_node(
    g: &mut Graph,
    q: Var,
    bank: &MemoryBank,
    params: &DiscretizationParams,
) -> Result<Var> {
    if g.value(q).shape().last() != Some(&bank.dim()) {
        return Err(Error::Shape(format!(
            "features {:?} do not match memory dimension {}",
            g.value(q).shape(),
            bank.dim()
        )));
    }
    let (loss, rows) = discretization_terms(g.value(q).data(), bank, params)?;
    Ok(g.discretization(q, bank.items(), loss, rows))
}

/// Components of the objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub lp1: f64,
    pub ls1: f64,
    pub lp2: f64,
    pub ls2: f64,
    pub total: f64,
}

/// `γ_i·(L_p1 + α_s·L_s1) + (1−γ_i)·(L_p2 + β_s·L_s2)`.
pub fn total_loss(spatial: (f64, f64), temporal: (f64, f64), w: &LossWeights) -> Result<LossBreakdown> {
    let (lp1, ls1) = spatial;
    let (lp2, ls2) = temporal;
    for (name, v) in [("lp1", lp1), ("ls1", ls1), ("lp2", lp2), ("ls2", ls2)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("loss component {name} is {v}")));
        }
    }
    let li = lp1 + w.alpha_s * ls1;
    let lx = lp2 + w.beta_s * ls2;
    Ok(LossBreakdown {
        lp1,
        ls1,
        lp2,
        ls2,
        total: w.gamma_i * li + w.gamma_x() * lx,
    })
}

/// Graph version of [`total_loss`].
pub fn total_loss_node(
    g: &mut Graph,
    spatial: (Var, Var),
    temporal: (Var, Var),
    w: &LossWeights,
) -> Result<Var> {
    g.lin_comb(&[
        (spatial.0, w.gamma_i),
        (spatial.1, w.gamma_i * w.alpha_s),
        (temporal.0, w.gamma_x()),
        (temporal.1, w.gamma_x() * w.beta_s),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(deg: f64) -> [f64; 2] {
        let r = deg.to_radians();
        [r.cos(), r.sin()]
    }

    #[test]
    fn prediction_loss_cases() {
        let a = Tensor::full(&[4, 4], 0.3);
        assert_eq!(prediction_loss(&a, &a, Reduction::Mean).unwrap(), 0.0);
        let b = Tensor::full(&[4, 4], 2.3);
        assert_abs_diff_eq!(prediction_loss(&b, &a, Reduction::Mean).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prediction_loss(&b, &a, Reduction::Sum).unwrap(), 64.0, epsilon = 1e-9);
        assert!(prediction_loss(&a, &Tensor::zeros(&[2, 8]), Reduction::Mean).is_err());
    }

    #[test]
    fn prediction_loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let mut s = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let d = a.data()[i * 8 + j] - b.data()[i * 8 + j];
                s += d * d;
            }
        }
        assert_abs_diff_eq!(prediction_loss(&a, &b, Reduction::Mean).unwrap(), s / 64.0, epsilon = 1e-9);
    }

    #[test]
    fn discretization_three_item_circle() {
        let items: Vec<f64> = [0.0, 90.0, 180.0].iter().flat_map(|&d| unit(d)).collect();
        let bank = MemoryBank::from_items(Tensor::new(vec![3, 2], items).unwrap()).unwrap();
        let q = unit(10.0);
        let feats = Tensor::new(vec![1, 2], q.to_vec()).unwrap();
        // nearest 0°, then 90°, then 180°
        let d = |p: [f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let d_near = d(unit(0.0));
        let d_second = d(unit(90.0));
        let gap = ((unit(180.0)[0] - unit(90.0)[0]).powi(2) + (unit(180.0)[1] - unit(90.0)[1]).powi(2)).sqrt();
        let want = (d_near - d_second + 2.0).max(0.0) + (d_near - gap + 1.0).max(0.0);
        let p = DiscretizationParams {
            a: 2.0,
            b: 1.0,
            hinge: true,
            square_gap: false,
        };
        assert_abs_diff_eq!(discretization_loss(&feats, &bank, &p).unwrap(), want, epsilon = 1e-12);
        // (2 − 2cos10°) − (2 − 2cos80°) + 2; the second term clamps since √2 > 1 + 0.0304
        assert_abs_diff_eq!(want, 0.3776808493, epsilon = 1e-9);
    }

    #[test]
    fn satisfied_margins_give_zero() {
        // feature on item 0: both margins are met exactly or with room to spare
        let items = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0];
        let bank = MemoryBank::from_items(Tensor::new(vec![3, 2], items).unwrap()).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = DiscretizationParams {
            a: 2.0,
            b: 1.0,
            hinge: true,
            square_gap: false,
        };
        // nearest 0 (cos 1), then 2 (cos 0), then 1 (cos −1)
        // term1 = 0 − 2 + 2 = 0, term2 = 0 − √2 + 1 < 0
        assert_eq!(discretization_loss(&q, &bank, &p).unwrap(), 0.0);
    }

    #[test]
    fn literal_mode_can_go_negative() {
        let items = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0];
        let bank = MemoryBank::from_items(Tensor::new(vec![3, 2], items).unwrap()).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = DiscretizationParams {
            a: 0.0,
            b: 0.0,
            hinge: false,
            square_gap: false,
        };
        assert!(discretization_loss(&q, &bank, &p).unwrap() < 0.0);
    }

    #[test]
    fn discretization_requires_three_items() {
        let bank = MemoryBank::from_items(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = DiscretizationParams::from_weights(&LossWeights::default());
        assert!(matches!(discretization_loss(&q, &bank, &p), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_arithmetic_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(total_loss((0.0, 0.0), (0.0, 0.0), &w).unwrap().total, 0.0);
        let l = total_loss((1.0, 2.0), (3.0, 4.0), &w).unwrap();
        assert_abs_diff_eq!(l.total, 2.3, epsilon = 1e-12);
        let bumped = total_loss((1.0, 2.5), (3.0, 4.0), &w).unwrap();
        assert_abs_diff_eq!(bumped.total - l.total, 0.5 * w.gamma_i * w.alpha_s, epsilon = 1e-12);
        assert!(total_loss((f64::NAN, 0.0), (0.0, 0.0), &w).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha_s, w.beta_s, w.gamma_i, w.gamma_x()), (0.1, 0.1, 0.5, 0.5));
        assert_eq!((w.a, w.b), (2.0, 1.0));
        assert!(LossWeights { gamma_i: 1.5, ..w }.validate().is_err());
    }
}

//! Reusable network blocks: temporal shift, the residual temporal shift
//! module (RTSM), the conv block, channel attention (CAB) and the residual
//! channel attention module (RCAM).
//!
//! Each block has a graph builder (used by the network and for gradients) and
//! a standalone function over a [`FeatureMap`]. The standalone versions
//! normalize batch norm with the statistics of the map itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, ShiftMode, Var};
use crate::params::{BnIds, Bound, ConvIds, Mode, ParamStore};
use crate::tensor::Tensor;

/// A `T×H×W×C` feature map with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims4()?;
        if dims.contains(&0) {
            return Err(Error::Shape(format!("feature map axes must be >= 1, got {dims:?}")));
        }
        if !t.all_finite() {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `[T, H, W, C]`
    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4().expect("validated rank 4")
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        let [_, hh, ww, cc] = self.dims();
        self.0.data()[((t * hh + h) * ww + w) * cc + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub leaky_slope: f64,
    /// Fraction of channels shifted per direction.
    pub shift_fraction: f64,
    pub shift_mode: ShiftMode,
    /// Batch norm between the two convolutions of the conv block.
    pub batchnorm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            leaky_slope: 0.2,
            shift_fraction: 0.125,
            shift_mode: ShiftMode::Bidirectional,
            batchnorm: true,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        check_shift_fraction(self.shift_fraction)
    }

    /// Channels moved per direction for a `c`-channel map.
    pub fn shift_groups(&self, c: usize) -> usize {
        shift_groups(self.shift_fraction, c)
    }
}

fn check_shift_fraction(f: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&f) {
        return Err(Error::InvalidInput(format!(
            "shift fraction must lie in [0, 0.5], got {f}"
        )));
    }
    Ok(())
}

fn shift_groups(fraction: f64, c: usize) -> usize {
    (fraction * c as f64).floor() as usize
}

/// Graph form of the temporal shift on a `[B·frames, H, W, C]` tensor.
pub fn temporal_shift_node(
    g: &mut Graph,
    x: Var,
    frames: usize,
    cfg: &BlockConfig,
) -> Result<Var> {
    check_shift_fraction(cfg.shift_fraction)?;
    let c = g.value(x).dims4()?[3];
    g.temporal_shift(x, frames, cfg.shift_groups(c), cfg.shift_mode)
}

/// Moves the first `⌊fraction·C⌋` channels one frame forward in time and the
/// next `⌊fraction·C⌋` one frame backward; out-of-range frames contribute
/// zeros and the remaining channels pass through.
pub fn temporal_shift(q: &FeatureMap, shift_fraction: f64) -> Result<FeatureMap> {
    temporal_shift_with(q, shift_fraction, ShiftMode::Bidirectional)
}

pub fn temporal_shift_with(q: &FeatureMap, shift_fraction: f64, mode: ShiftMode) -> Result<FeatureMap> {
    check_shift_fraction(shift_fraction)?;
    let [t, _, _, c] = q.dims();
    let mut g = Graph::new();
    let x = g.constant(q.tensor().clone());
    let y = g.temporal_shift(x, t, shift_groups(shift_fraction, c), mode)?;
    Ok(FeatureMap(g.value(y).clone()))
}

/// Two shape-preserving 3×3 convolutions inside a residual branch fed by the
/// temporally shifted input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtsmIds {
    pub conv1: ConvIds,
    pub conv2: ConvIds,
}

impl RtsmIds {
    pub fn init(store: &mut ParamStore, name: &str, c: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvIds::conv(store, &format!("{name}.conv1"), 3, c, c, cfg.leaky_slope, rng),
            conv2: ConvIds::conv(store, &format!("{name}.conv2"), 3, c, c, cfg.leaky_slope, rng),
        }
    }
}

fn conv(g: &mut Graph, p: &Bound, ids: &ConvIds, x: Var, geom: ConvGeom) -> Result<Var> {
    g.conv2d(x, p.var(ids.w), p.var(ids.b), geom)
}

/// `δ(q + w2·δ(w1·shift(q)))`
pub fn rtsm(
    g: &mut Graph,
    p: &Bound,
    ids: &RtsmIds,
    x: Var,
    frames: usize,
    cfg: &BlockConfig,
) -> Result<Var> {
    let shifted = temporal_shift_node(g, x, frames, cfg)?;
    let h = conv(g, p, &ids.conv1, shifted, ConvGeom::SAME3)?;
    let h = g.leaky_relu(h, cfg.leaky_slope);
    let h = conv(g, p, &ids.conv2, h, ConvGeom::SAME3)?;
    let sum = g.add(x, h)?;
    Ok(g.leaky_relu(sum, cfg.leaky_slope))
}

pub fn rtsm_forward(q: &FeatureMap, store: &ParamStore, ids: &RtsmIds, cfg: &BlockConfig) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, Mode::Train, false);
    let x = g.constant(q.tensor().clone());
    let y = rtsm(&mut g, &p, ids, x, q.dims()[0], cfg)?;
    Ok(FeatureMap(g.value(y).clone()))
}

/// 3×3 conv → batch norm → leaky ReLU → 3×3 conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockIds {
    pub conv1: ConvIds,
    pub bn: Option<BnIds>,
    pub conv2: ConvIds,
}

impl ConvBlockIds {
    pub fn init(store: &mut ParamStore, name: &str, c: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let conv1 = ConvIds::conv(store, &format!("{name}.conv1"), 3, c, c, cfg.leaky_slope, rng);
        let bn = cfg.batchnorm.then(|| BnIds::init(store, &format!("{name}.bn"), c));
        let conv2 = ConvIds::conv(store, &format!("{name}.conv2"), 3, c, c, cfg.leaky_slope, rng);
        Self { conv1, bn, conv2 }
    }
}

pub fn conv_block(
    g: &mut Graph,
    p: &mut Bound,
    ids: &ConvBlockIds,
    x: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    let mut h = conv(g, p, &ids.conv1, x, ConvGeom::SAME3)?;
    if let Some(bn) = ids.bn {
        h = match p.mode() {
            Mode::Train => {
                let (y, stats) = g.batch_norm(h, p.var(bn.gamma), p.var(bn.beta))?;
                p.record_bn(bn, stats);
                y
            }
            Mode::Eval => g.batch_norm_frozen(
                h,
                p.var(bn.gamma),
                p.var(bn.beta),
                p.tensor(bn.running_mean).data(),
                p.tensor(bn.running_var).data(),
            )?,
        };
    }
    let h = g.leaky_relu(h, cfg.leaky_slope);
    conv(g, p, &ids.conv2, h, ConvGeom::SAME3)
}

pub fn conv_block_forward(
    q: &FeatureMap,
    store: &ParamStore,
    ids: &ConvBlockIds,
    cfg: &BlockConfig,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let mut p = store.bind(&mut g, Mode::Train, false);
    let x = g.constant(q.tensor().clone());
    let y = conv_block(&mut g, &mut p, ids, x, cfg)?;
    Ok(FeatureMap(g.value(y).clone()))
}

/// Squeeze (global average pool) and two 1×1 convolutions, `C → C/r → C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CabIds {
    pub reduce: ConvIds,
    pub expand: ConvIds,
}

impl CabIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        reduction: usize,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !c.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "reduction ratio {reduction} does not divide {c} channels"
            )));
        }
        let mid = c / reduction;
        Ok(Self {
            reduce: ConvIds::conv(store, &format!("{name}.reduce"), 1, c, mid, cfg.leaky_slope, rng),
            expand: ConvIds::conv(store, &format!("{name}.expand"), 1, mid, c, cfg.leaky_slope, rng),
        })
    }
}

/// Per-sample channel weights `σ(W4·δ(W3·GAP(U)))`, shape `[N, 1, 1, C]`.
pub fn cab(g: &mut Graph, p: &Bound, ids: &CabIds, u: Var, cfg: &BlockConfig) -> Result<Var> {
    let z = g.global_avg_pool(u)?;
    let h = conv(g, p, &ids.reduce, z, ConvGeom::POINTWISE)?;
    let h = g.leaky_relu(h, cfg.leaky_slope);
    let s = conv(g, p, &ids.expand, h, ConvGeom::POINTWISE)?;
    Ok(g.sigmoid(s))
}

/// Channel weights for every frame of `u`, as a `T×C` tensor.
pub fn cab_weights(u: &FeatureMap, store: &ParamStore, ids: &CabIds, cfg: &BlockConfig) -> Result<Tensor> {
    let [t, _, _, c] = u.dims();
    let mut g = Graph::new();
    let p = store.bind(&mut g, Mode::Train, false);
    let x = g.constant(u.tensor().clone());
    let s = cab(&mut g, &p, ids, x, cfg)?;
    g.value(s).clone().reshape(&[t, c])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcamIds {
    pub block: ConvBlockIds,
    pub cab: CabIds,
}

impl RcamIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        reduction: usize,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            block: ConvBlockIds::init(store, &format!("{name}.block"), c, cfg, rng),
            cab: CabIds::init(store, &format!("{name}.cab"), c, reduction, cfg, rng)?,
        })
    }
}

/// `q + U ⊗ s(U)` with `U` the conv block output.
pub fn rcam(g: &mut Graph, p: &mut Bound, ids: &RcamIds, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let u = conv_block(g, p, &ids.block, x, cfg)?;
    let s = cab(g, p, &ids.cab, u, cfg)?;
    let weighted = g.channel_scale(u, s)?;
    g.add(x, weighted)
}

pub fn rcam_forward(q: &FeatureMap, store: &ParamStore, ids: &RcamIds, cfg: &BlockConfig) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let mut p = store.bind(&mut g, Mode::Train, false);
    let x = g.constant(q.tensor().clone());
    let y = rcam(&mut g, &mut p, ids, x, cfg)?;
    Ok(FeatureMap(g.value(y).clone()))
}

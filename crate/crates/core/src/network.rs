//! Dual-stream predictive autoencoder.
//!
//! Each subnetwork encodes `t−1` inputs with a stem convolution followed by
//! `levels` stages of stride-2 convolution + RTSM, keeping time as a batch
//! axis. At every resolution the time steps are concatenated on channels and
//! projected back by a 1×1 convolution; the L2-normalized result is the query
//! of that level's memory module. The decoder starts from the bottleneck
//! query concatenated with its memory read, and each stage upsamples with a
//! transposed convolution, applies an RCAM and concatenates the memory read
//! of the matching encoder level. A final 3×3 convolution with a tanh head
//! produces the prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, BlockConfig, RcamIds, RtsmIds};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::memory::MemoryBank;
use crate::params::{Bound, ConvIds, Mode, ParamStore};
use crate::tensor::Tensor;

/// How the spatial and temporal predictions are combined into one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// `½·(Î + (I_last + X̂))`: both addends estimate the same frame.
    MeanMotionCompensated,
    /// `Î + X̂`.
    LiteralSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    /// Window length `t`; the network sees `t − 1` inputs.
    pub clip_len: usize,
    pub levels: usize,
    /// Channels of encoder stages `1..=levels` (the stem uses the first entry).
    pub channels: Vec<usize>,
    pub memory_items: usize,
    pub reduction_ratio: usize,
    pub block: BlockConfig,
    pub fusion: FusionMode,
    /// Disable to replace every memory read by the identity (ablation).
    pub use_memory: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            image_channels: 1,
            clip_len: 5,
            levels: 4,
            channels: vec![32, 64, 128, 256],
            memory_items: 20,
            reduction_ratio: 16,
            block: BlockConfig::default(),
            fusion: FusionMode::MeanMotionCompensated,
            use_memory: true,
        }
    }
}

impl ModelConfig {
    pub fn input_frames(&self) -> usize {
        self.clip_len - 1
    }

    /// Channel count of encoder level `i` (0 = stem, `levels` = bottleneck).
    pub fn level_channels(&self, i: usize) -> usize {
        self.channels[i.saturating_sub(1)]
    }

    pub fn memory_modules(&self) -> usize {
        self.levels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "channels lists {} entries for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        let f = 1usize << self.levels;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input size {}x{} must be divisible by 2^levels = {f}",
                self.height, self.width
            )));
        }
        if self.clip_len < 2 {
            return Err(Error::Config(format!("clip_len must be >= 2, got {}", self.clip_len)));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.use_memory && self.memory_items < 3 {
            return Err(Error::Config(format!(
                "memory needs at least 3 items, got {}",
                self.memory_items
            )));
        }
        for i in 0..self.levels {
            let c = self.level_channels(i);
            if self.reduction_ratio == 0 || !c.is_multiple_of(self.reduction_ratio) {
                return Err(Error::Config(format!(
                    "reduction ratio {} does not divide {c} decoder channels",
                    self.reduction_ratio
                )));
            }
        }
        self.block.validate()
    }
}

/// Which input a subnetwork consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    /// Frames in, next frame out (range `[−1, 1]`).
    Spatial,
    /// Frame differences in, next difference out (range `[−2, 2]`).
    Temporal,
}

impl Stream {
    pub fn output_scale(self) -> f64 {
        match self {
            Stream::Spatial => 1.0,
            Stream::Temporal => 2.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stream::Spatial => "spatial",
            Stream::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Architecture {
    stem: ConvIds,
    /// Stride-2 convolution and RTSM of encoder stages `1..=levels`.
    stages: Vec<(ConvIds, RtsmIds)>,
    /// Time-merging 1×1 convolutions of levels `0..=levels`.
    merges: Vec<ConvIds>,
    /// Upsampling and RCAM producing decoder level `i`, indexed by `i`.
    ups: Vec<(ConvIds, RcamIds)>,
    head: ConvIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subnet {
    stream: Stream,
    pub params: ParamStore,
    arch: Architecture,
    /// One bank per level `0..=levels` (empty when memory is disabled).
    pub banks: Vec<MemoryBank>,
}

/// Graph handles produced by one subnetwork pass.
#[derive(Debug, Clone)]
pub struct SubnetVars {
    pub prediction: Var,
    /// Normalized memory queries per level (`[B, h, w, c]`).
    pub features: Vec<Var>,
    /// Memory reads per level (queries themselves when memory is disabled).
    pub reads: Vec<Var>,
}

/// Values produced by one subnetwork pass.
#[derive(Debug, Clone)]
pub struct SubnetOutput {
    /// `[B, H, W, image_channels]`
    pub prediction: Tensor,
    /// Memory queries per level, `[B, h, w, c]`; the last entry is the bottleneck.
    pub level_features: Vec<Tensor>,
    /// Memory reads per level.
    pub level_reads: Vec<Tensor>,
}

impl SubnetOutput {
    pub fn bottleneck_features(&self) -> &Tensor {
        self.level_features.last().expect("at least one level")
    }
}

impl Subnet {
    fn build(config: &ModelConfig, stream: Stream, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = config.block.leaky_slope;
        let prefix = stream.name();
        let mut store = ParamStore::new();
        let tf = config.input_frames();
        let lc = |i: usize| config.level_channels(i);

        let stem = ConvIds::conv(&mut store, &format!("{prefix}.stem"), 3, config.image_channels, lc(0), slope, rng);
        let mut stages = Vec::with_capacity(config.levels);
        for i in 1..=config.levels {
            let down = ConvIds::conv(&mut store, &format!("{prefix}.enc{i}.down"), 3, lc(i - 1), lc(i), slope, rng);
            let rtsm = RtsmIds::init(&mut store, &format!("{prefix}.enc{i}.rtsm"), lc(i), &config.block, rng);
            stages.push((down, rtsm));
        }
        let merges = (0..=config.levels)
            .map(|i| ConvIds::conv(&mut store, &format!("{prefix}.merge{i}"), 1, tf * lc(i), lc(i), slope, rng))
            .collect();
        let mut ups = Vec::with_capacity(config.levels);
        for i in 0..config.levels {
            let up = ConvIds::up(&mut store, &format!("{prefix}.dec{i}.up"), 2 * lc(i + 1), lc(i), slope, rng);
            let rcam = RcamIds::init(
                &mut store,
                &format!("{prefix}.dec{i}.rcam"),
                lc(i),
                config.reduction_ratio,
                &config.block,
                rng,
            )?;
            ups.push((up, rcam));
        }
        let head = ConvIds::conv(&mut store, &format!("{prefix}.head"), 3, 2 * lc(0), config.image_channels, 1.0, rng);

        let banks = if config.use_memory {
            (0..=config.levels)
                .map(|i| MemoryBank::init(config.memory_items, lc(i), rng.gen()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            stream,
            params: store,
            arch: Architecture {
                stem,
                stages,
                merges,
                ups,
                head,
            },
            banks,
        })
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn memory_modules(&self) -> usize {
        self.banks.len()
    }

    /// Builds the subnetwork on `g` for inputs `[B·(t−1), H, W, ch]`.
    pub fn graph(
        &self,
        g: &mut Graph,
        p: &mut Bound,
        config: &ModelConfig,
        input: Var,
    ) -> Result<SubnetVars> {
        let tf = config.input_frames();
        let [n, h, w, ch] = g.value(input).dims4()?;
        if n % tf != 0 || h != config.height || w != config.width || ch != config.image_channels {
            return Err(Error::Shape(format!(
                "subnet input {:?} does not match {tf} frames of {}x{}x{}",
                g.value(input).shape(),
                config.height,
                config.width,
                config.image_channels
            )));
        }
        let slope = config.block.leaky_slope;
        let a = &self.arch;

        let x = g.conv2d(input, p.var(a.stem.w), p.var(a.stem.b), ConvGeom::SAME3)?;
        let mut x = g.leaky_relu(x, slope);
        let mut encoded = vec![x];
        for (down, rtsm) in &a.stages {
            let y = g.conv2d(x, p.var(down.w), p.var(down.b), ConvGeom::DOWN3)?;
            let y = g.leaky_relu(y, slope);
            x = blocks::rtsm(g, p, rtsm, y, tf, &config.block)?;
            encoded.push(x);
        }

        let mut features = Vec::with_capacity(encoded.len());
        let mut reads = Vec::with_capacity(encoded.len());
        for (i, e) in encoded.iter().enumerate() {
            let merged = g.merge_time(*e, tf)?;
            let m = &a.merges[i];
            let q = g.conv2d(merged, p.var(m.w), p.var(m.b), ConvGeom::POINTWISE)?;
            let f = g.l2_normalize_rows(q);
            let r = match self.banks.get(i) {
                Some(bank) => {
                    let b = g.constant(bank.items().clone());
                    g.memory_read(f, b)?
                }
                None => f,
            };
            features.push(f);
            reads.push(r);
        }

        let levels = config.levels;
        let mut y = g.concat_channels(features[levels], reads[levels])?;
        for i in (0..levels).rev() {
            let (up, rcam) = &a.ups[i];
            let u = g.conv_transpose2x2(y, p.var(up.w), p.var(up.b))?;
            let u = g.leaky_relu(u, slope);
            let u = blocks::rcam(g, p, rcam, u, &config.block)?;
            y = g.concat_channels(u, reads[i])?;
        }
        let out = g.conv2d(y, p.var(a.head.w), p.var(a.head.b), ConvGeom::SAME3)?;
        let prediction = g.tanh(out, self.stream.output_scale());
        Ok(SubnetVars {
            prediction,
            features,
            reads,
        })
    }

    /// Gradient-free pass over `[B·(t−1), H, W, ch]` inputs.
    pub fn forward(&self, config: &ModelConfig, inputs: &Tensor, mode: Mode) -> Result<SubnetOutput> {
        if !inputs.all_finite() {
            return Err(Error::InvalidInput("non-finite subnet input".into()));
        }
        let mut g = Graph::new();
        let mut p = self.params.bind(&mut g, mode, false);
        let x = g.constant(inputs.clone());
        let v = self.graph(&mut g, &mut p, config, x)?;
        Ok(SubnetOutput {
            prediction: g.value(v.prediction).clone(),
            level_features: v.features.iter().map(|&f| g.value(f).clone()).collect(),
            level_reads: v.reads.iter().map(|&r| g.value(r).clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub spatial: Subnet,
    pub temporal: Subnet,
}

impl Model {
    /// Deterministic construction of both subnetworks and their memories.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial = Subnet::build(&config, Stream::Spatial, &mut rng)?;
        let temporal = Subnet::build(&config, Stream::Temporal, &mut rng)?;
        Ok(Self {
            config,
            spatial,
            temporal,
        })
    }

    pub fn subnets(&self) -> [&Subnet; 2] {
        [&self.spatial, &self.temporal]
    }

    pub fn subnets_mut(&mut self) -> [&mut Subnet; 2] {
        [&mut self.spatial, &mut self.temporal]
    }

    /// Runs both streams on a stacked batch and fuses their predictions.
    pub fn dual_forward(&self, batch: &Batch, mode: Mode) -> Result<DualOutput> {
        let spatial = self.spatial.forward(&self.config, &batch.frames, mode)?;
        let temporal = self.temporal.forward(&self.config, &batch.diffs, mode)?;
        let fused = fuse_frames(
            &spatial.prediction,
            &temporal.prediction,
            &batch.last_frames,
            self.config.fusion,
        )?;
        Ok(DualOutput {
            fused,
            spatial,
            temporal,
        })
    }
}

/// A stack of `B` clips laid out for the subnetworks.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B·(t−1), H, W, ch]`
    pub frames: Tensor,
    /// `[B·(t−1), H, W, ch]`
    pub diffs: Tensor,
    /// `[B, H, W, ch]`
    pub target_frames: Tensor,
    /// `[B, H, W, ch]`
    pub target_diffs: Tensor,
    /// Last input frame of every clip, `[B, H, W, ch]`.
    pub last_frames: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target_frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct DualOutput {
    /// `[B, H, W, ch]` in `[−1, 1]`.
    pub fused: Tensor,
    pub spatial: SubnetOutput,
    pub temporal: SubnetOutput,
}

/// Combines the spatial frame prediction `i_hat` and the temporal difference
/// prediction `x_hat` into one frame, clamped to `[−1, 1]`.
pub fn fuse_frames(i_hat: &Tensor, x_hat: &Tensor, i_last: &Tensor, mode: FusionMode) -> Result<Tensor> {
    i_hat.expect_same_shape(x_hat)?;
    i_hat.expect_same_shape(i_last)?;
    let data = i_hat
        .data()
        .iter()
        .zip(x_hat.data())
        .zip(i_last.data())
        .map(|((&i, &x), &l)| {
            let y = match mode {
                FusionMode::MeanMotionCompensated => 0.5 * (i + (l + x)),
                FusionMode::LiteralSum => i + x,
            };
            y.clamp(-1.0, 1.0)
        })
        .collect();
    Tensor::new(i_hat.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            clip_len: 3,
            levels: 2,
            channels: vec![4, 8],
            memory_items: 4,
            reduction_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn batch_of(config: &ModelConfig, b: usize, value: f64) -> Batch {
        let tf = config.input_frames();
        let (h, w, c) = (config.height, config.width, config.image_channels);
        Batch {
            frames: Tensor::full(&[b * tf, h, w, c], value),
            diffs: Tensor::zeros(&[b * tf, h, w, c]),
            target_frames: Tensor::full(&[b, h, w, c], value),
            target_diffs: Tensor::zeros(&[b, h, w, c]),
            last_frames: Tensor::full(&[b, h, w, c], value),
        }
    }

    #[test]
    fn memory_module_count_is_levels_plus_one() {
        let cfg = ModelConfig {
            height: 32,
            width: 32,
            channels: vec![16, 16, 32, 32],
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        assert_eq!(model.spatial.memory_modules(), 5);
        assert_eq!(model.temporal.memory_modules(), 5);
    }

    #[test]
    fn prediction_shape_and_range() {
        let cfg = ModelConfig {
            channels: vec![16, 16, 16, 16],
            ..ModelConfig::default()
        };
        let model = Model::build(cfg.clone(), 0).unwrap();
        let inputs = Tensor::from_fn(&[4, 64, 64, 1], |i| ((i * 7919) % 255) as f64 / 127.5 - 1.0);
        let out = model.spatial.forward(&cfg, &inputs, Mode::Eval).unwrap();
        assert_eq!(out.prediction.shape(), &[1, 64, 64, 1]);
        assert!(out.prediction.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(tiny_config(), 7).unwrap();
        let b = Model::build(tiny_config(), 7).unwrap();
        let c = Model::build(tiny_config(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.spatial.params, c.spatial.params);
    }

    #[test]
    fn skip_concatenation_doubles_decoder_channels() {
        let cfg = tiny_config();
        let model = Model::build(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let mut p = model.spatial.params.bind(&mut g, Mode::Eval, false);
        let x = g.constant(Tensor::zeros(&[2 * cfg.input_frames(), 16, 16, 1]));
        let v = model.spatial.graph(&mut g, &mut p, &cfg, x).unwrap();
        for (i, f) in v.features.iter().enumerate() {
            let d = g.value(*f).dims4().unwrap();
            assert_eq!(d, [2, 16 >> i, 16 >> i, cfg.level_channels(i)]);
        }
        for (i, (up, _)) in model.spatial.arch.ups.iter().enumerate() {
            let rows = model.spatial.params.get(up.w).shape()[0];
            assert_eq!(rows, 2 * cfg.level_channels(i + 1));
        }
        let head_rows = model.spatial.params.get(model.spatial.arch.head.w).shape()[0];
        assert_eq!(head_rows, 9 * 2 * cfg.level_channels(0));
    }

    #[test]
    fn zero_inputs_give_finite_outputs() {
        let cfg = tiny_config();
        let model = Model::build(cfg.clone(), 1).unwrap();
        let out = model.dual_forward(&batch_of(&cfg, 2, 0.0), Mode::Train).unwrap();
        assert!(out.fused.all_finite());
        assert!(out.temporal.prediction.data().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn dual_forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::build(cfg.clone(), 2).unwrap();
        let batch = batch_of(&cfg, 1, 0.3);
        let a = model.dual_forward(&batch, Mode::Eval).unwrap();
        let b = model.dual_forward(&batch, Mode::Eval).unwrap();
        assert_eq!(a.fused, b.fused);
        assert!(a.fused.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn config_validation() {
        let ok = tiny_config();
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { height: 18, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { channels: vec![4], ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { clip_len: 1, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { reduction_ratio: 3, ..ok }.validate().is_err());
    }

    #[test]
    fn fusion_identities() {
        let i_last = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64 * 0.2 - 0.3);
        let i_t = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64 * 0.1);
        let x_t = i_t.zip_map(&i_last, |a, b| a - b).unwrap();
        let y = fuse_frames(&i_t, &x_t, &i_last, FusionMode::MeanMotionCompensated).unwrap();
        for (a, b) in y.data().iter().zip(i_t.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = Tensor::zeros(&[1, 2, 2, 1]);
        let y = fuse_frames(&i_last, &zero, &i_last, FusionMode::MeanMotionCompensated).unwrap();
        assert_eq!(y, i_last);
        let y = fuse_frames(
            &Tensor::full(&[1, 2, 2, 1], 0.3),
            &Tensor::full(&[1, 2, 2, 1], 0.2),
            &i_last,
            FusionMode::LiteralSum,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(fuse_frames(&zero, &Tensor::zeros(&[1, 2, 1, 1]), &zero, FusionMode::LiteralSum).is_err());
    }
}

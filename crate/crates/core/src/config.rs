//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. [`RunConfig::to_text`] writes every key, so
//! its output parses back to the same configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ShiftMode;
use crate::losses::{LossWeights, Reduction};
use crate::network::{FusionMode, ModelConfig};
use crate::pipeline::{EvalConfig, TrainConfig};
use crate::scoring::{DistanceScope, NormalizationScope, PsnrConvention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// `None` defers to the command line or the environment.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Frame directory of the single-video `score` command.
    pub frames: Option<PathBuf>,
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "height",
    "width",
    "image_channels",
    "clip_len",
    "levels",
    "channels",
    "memory_items",
    "reduction_ratio",
    "leaky_slope",
    "shift_fraction",
    "shift_mode",
    "batchnorm",
    "use_memory",
    "fusion_mode",
    "alpha_s",
    "beta_s",
    "gamma_i",
    "margin_a",
    "margin_b",
    "square_gap",
    "prediction_reduction",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "bn_momentum",
    "lambda",
    "psnr_convention",
    "normalization_scope",
    "distance_scope",
    "eval_batch_size",
    "error_maps",
    "seed",
    "data",
    "out",
    "checkpoint",
    "frames",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("invalid value `{value}` for `{key}`; expected one of {}", names.join(", ")))
        })
}

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).unwrap_or("?")
}

const SHIFT_MODES: &[(&str, ShiftMode)] = &[
    ("bidirectional", ShiftMode::Bidirectional),
    ("past_only", ShiftMode::PastOnly),
];
const FUSION_MODES: &[(&str, FusionMode)] = &[
    ("mean_motion_compensated", FusionMode::MeanMotionCompensated),
    ("literal_sum", FusionMode::LiteralSum),
];
const REDUCTIONS: &[(&str, Reduction)] = &[("mean", Reduction::Mean), ("sum", Reduction::Sum)];
const PSNR_CONVENTIONS: &[(&str, PsnrConvention)] = &[
    ("paper", PsnrConvention::Paper),
    ("standard", PsnrConvention::Standard),
];
const SCOPES: &[(&str, NormalizationScope)] = &[
    ("per_video", NormalizationScope::PerVideo),
    ("global", NormalizationScope::Global),
];
const DISTANCE_SCOPES: &[(&str, DistanceScope)] = &[
    ("bottleneck", DistanceScope::Bottleneck),
    ("all", DistanceScope::AllModules),
];

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies the settings of `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let w = &mut self.weights;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "image_channels" => m.image_channels = parse(key, value)?,
            "clip_len" => m.clip_len = parse(key, value)?,
            "levels" => m.levels = parse(key, value)?,
            "channels" => {
                m.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "memory_items" => m.memory_items = parse(key, value)?,
            "reduction_ratio" => m.reduction_ratio = parse(key, value)?,
            "leaky_slope" => m.block.leaky_slope = parse(key, value)?,
            "shift_fraction" => m.block.shift_fraction = parse(key, value)?,
            "shift_mode" => m.block.shift_mode = choice(key, value, SHIFT_MODES)?,
            "batchnorm" => m.block.batchnorm = parse(key, value)?,
            "use_memory" => m.use_memory = parse(key, value)?,
            "fusion_mode" => m.fusion = choice(key, value, FUSION_MODES)?,
            "alpha_s" => w.alpha_s = parse(key, value)?,
            "beta_s" => w.beta_s = parse(key, value)?,
            "gamma_i" => w.gamma_i = parse(key, value)?,
            "margin_a" => w.a = parse(key, value)?,
            "margin_b" => w.b = parse(key, value)?,
            "square_gap" => t.square_gap = parse(key, value)?,
            "prediction_reduction" => t.reduction = choice(key, value, REDUCTIONS)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "bn_momentum" => t.bn_momentum = parse(key, value)?,
            "lambda" => e.lambda = parse(key, value)?,
            "psnr_convention" => e.psnr_convention = choice(key, value, PSNR_CONVENTIONS)?,
            "normalization_scope" => e.normalization = choice(key, value, SCOPES)?,
            "distance_scope" => e.distance = choice(key, value, DISTANCE_SCOPES)?,
            "eval_batch_size" => e.batch_size = parse(key, value)?,
            "error_maps" => e.error_maps = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "data" => self.data = path_value(value),
            "out" => self.out = path_value(value),
            "checkpoint" => self.checkpoint = path_value(value),
            "frames" => self.frames = path_value(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (m, w, t, e) = (&self.model, &self.weights, &self.train, &self.eval);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "image_channels" => m.image_channels.to_string(),
            "clip_len" => m.clip_len.to_string(),
            "levels" => m.levels.to_string(),
            "channels" => m.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "memory_items" => m.memory_items.to_string(),
            "reduction_ratio" => m.reduction_ratio.to_string(),
            "leaky_slope" => m.block.leaky_slope.to_string(),
            "shift_fraction" => m.block.shift_fraction.to_string(),
            "shift_mode" => name_of(SHIFT_MODES, m.block.shift_mode).into(),
            "batchnorm" => m.block.batchnorm.to_string(),
            "use_memory" => m.use_memory.to_string(),
            "fusion_mode" => name_of(FUSION_MODES, m.fusion).into(),
            "alpha_s" => w.alpha_s.to_string(),
            "beta_s" => w.beta_s.to_string(),
            "gamma_i" => w.gamma_i.to_string(),
            "margin_a" => w.a.to_string(),
            "margin_b" => w.b.to_string(),
            "square_gap" => t.square_gap.to_string(),
            "prediction_reduction" => name_of(REDUCTIONS, t.reduction).into(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "bn_momentum" => t.bn_momentum.to_string(),
            "lambda" => e.lambda.to_string(),
            "psnr_convention" => name_of(PSNR_CONVENTIONS, e.psnr_convention).into(),
            "normalization_scope" => name_of(SCOPES, e.normalization).into(),
            "distance_scope" => name_of(DISTANCE_SCOPES, e.distance).into(),
            "eval_batch_size" => e.batch_size.to_string(),
            "error_maps" => e.error_maps.to_string(),
            "seed" => self.seed.map(|s| s.to_string()).unwrap_or_default(),
            "data" => path(&self.data),
            "out" => path(&self.out),
            "checkpoint" => path(&self.checkpoint),
            "frames" => path(&self.frames),
            _ => unreachable!("every key in KEYS is handled"),
        }
    }

    /// Every key with its current value; unset optional keys are written
    /// commented out.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| {
                let v = self.get(k);
                let optional = matches!(*k, "seed" | "data" | "out" | "checkpoint" | "frames");
                if optional && v.is_empty() {
                    format!("# {k} =\n")
                } else {
                    format!("{k} = {v}\n")
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

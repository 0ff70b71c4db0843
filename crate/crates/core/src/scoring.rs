//! Per-frame anomaly scores: prediction PSNR, memory distances, per-series
//! min-max normalization and their weighted fusion.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::tensor::Tensor;

/// Value returned when the prediction error vanishes.
pub const PSNR_CAP: f64 = 100.0;
/// Errors below this are treated as zero.
pub const MSE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsnrConvention {
    /// `10·log10(max / mse)`
    Paper,
    /// `10·log10(max² / mse)`
    Standard,
}

/// Whether min-max normalization runs per test video or over the whole test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationScope {
    PerVideo,
    Global,
}

/// Which memory modules contribute to the distance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceScope {
    Bottleneck,
    /// Mean of the per-module distances.
    AllModules,
}

/// Maps `[−1, 1]` pixels to `[0, 1]`.
pub fn to_unit_range(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) * 0.5)
}

/// PSNR in dB of `pred` against `target`, both in `[0, 1]`.
///
/// Returns [`PSNR_CAP`] when the mean squared error is below [`MSE_FLOOR`];
/// a non-positive `max(pred)` is replaced by 1.
pub fn psnr(pred: &Tensor, target: &Tensor, convention: PsnrConvention) -> Result<f64> {
    pred.expect_same_shape(target)?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("psnr of an empty frame".into()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    let peak = pred.max();
    let peak = if peak > 0.0 { peak } else { 1.0 };
    let numerator = match convention {
        PsnrConvention::Paper => peak,
        PsnrConvention::Standard => peak * peak,
    };
    Ok((10.0 * (numerator / mse).log10()).min(PSNR_CAP))
}

/// Mean Euclidean distance of each feature (last axis) to its most similar
/// memory item.
pub fn memory_distance(features: &Tensor, bank: &MemoryBank) -> Result<f64> {
    let c = bank.dim();
    if features.shape().last() != Some(&c) {
        return Err(Error::Shape(format!(
            "features {:?} do not match memory dimension {c}",
            features.shape()
        )));
    }
    if features.is_empty() {
        return Err(Error::InvalidInput("no features to score".into()));
    }
    let items = bank.items().data();
    let rows = features.data().chunks_exact(c);
    let k = rows.len();
    let total: f64 = rows
        .map(|q| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (m, p) in items.chunks_exact(c).enumerate() {
                let s: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
                if s > best_sim {
                    best_sim = s;
                    best = m;
                }
            }
            let p = &items[best * c..(best + 1) * c];
            q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / k as f64)
}

/// `(x − min) / (max − min)`; a constant series maps to zeros.
pub fn minmax_normalize(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in score series".into()));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; series.len()]);
    }
    Ok(series.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// `λ·(1 − g(P)) + ½(1−λ)·g(D_i) + ½(1−λ)·g(D_x)` with each series normalized on its own.
pub fn fuse_scores(psnr: &[f64], d_spatial: &[f64], d_temporal: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let g = [psnr, d_spatial, d_temporal]
        .iter()
        .map(|s| minmax_normalize(s))
        .collect::<Result<Vec<_>>>()?;
    fuse_normalized(&g[0], &g[1], &g[2], lambda)
}

/// Fusion of series that are already normalized.
pub fn fuse_normalized(gp: &[f64], gi: &[f64], gx: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if gp.len() != gi.len() || gp.len() != gx.len() {
        return Err(Error::Shape(format!(
            "score series lengths differ: {}, {}, {}",
            gp.len(),
            gi.len(),
            gx.len()
        )));
    }
    let half = 0.5 * (1.0 - lambda);
    Ok(gp
        .iter()
        .zip(gi)
        .zip(gx)
        .map(|((p, i), x)| (lambda * (1.0 - p) + half * i + half * x).clamp(0.0, 1.0))
        .collect())
}

/// Raw per-frame measurements of one video before normalization.
///
/// Measurements exist for frames `first_scored..frame_count`; earlier frames
/// lack a full input window.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub video_id: String,
    pub frame_count: usize,
    pub first_scored: usize,
    pub psnr: Vec<f64>,
    pub d_spatial: Vec<f64>,
    pub d_temporal: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: Option<f64>,
    pub d_spatial: Option<f64>,
    pub d_temporal: Option<f64>,
    pub score: f64,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frames: Vec<FrameScore>,
}

pub const SCORE_CSV_HEADER: &str = "frame,psnr,d_spatial,d_temporal,score,label";

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ScoreSeries {
    pub fn scores(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.score).collect()
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCORE_CSV_HEADER);
        out.push('\n');
        for f in &self.frames {
            let label = f.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                f.frame,
                cell(f.psnr),
                cell(f.d_spatial),
                cell(f.d_temporal),
                f.score,
                label
            )
            .expect("writing to a String");
        }
        out
    }
}

impl RawScores {
    fn validate(&self) -> Result<()> {
        let n = self.frame_count.saturating_sub(self.first_scored);
        if self.first_scored >= self.frame_count
            || self.psnr.len() != n
            || self.d_spatial.len() != n
            || self.d_temporal.len() != n
        {
            return Err(Error::Shape(format!(
                "video `{}`: {} frames with scoring from {} but series of length {}, {}, {}",
                self.video_id,
                self.frame_count,
                self.first_scored,
                self.psnr.len(),
                self.d_spatial.len(),
                self.d_temporal.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.frame_count {
                return Err(Error::Shape(format!(
                    "video `{}`: {} labels for {} frames",
                    self.video_id,
                    l.len(),
                    self.frame_count
                )));
            }
        }
        Ok(())
    }
}

/// Normalizes, fuses and pads raw measurements into full-length series.
/// Frames without a full window receive their video's minimum fused score.
pub fn assemble_series(raw: &[RawScores], lambda: f64, scope: NormalizationScope) -> Result<Vec<ScoreSeries>> {
    for r in raw {
        r.validate()?;
    }
    let normalized: Vec<[Vec<f64>; 3]> = match scope {
        NormalizationScope::PerVideo => raw
            .iter()
            .map(|r| {
                Ok([
                    minmax_normalize(&r.psnr)?,
                    minmax_normalize(&r.d_spatial)?,
                    minmax_normalize(&r.d_temporal)?,
                ])
            })
            .collect::<Result<_>>()?,
        NormalizationScope::Global => {
            let concat = |f: fn(&RawScores) -> &Vec<f64>| -> Result<Vec<f64>> {
                minmax_normalize(&raw.iter().flat_map(|r| f(r).iter().copied()).collect::<Vec<_>>())
            };
            let (gp, gi, gx) = if raw.is_empty() {
                (Vec::new(), Vec::new(), Vec::new())
            } else {
                (concat(|r| &r.psnr)?, concat(|r| &r.d_spatial)?, concat(|r| &r.d_temporal)?)
            };
            let mut offset = 0;
            raw.iter()
                .map(|r| {
                    let n = r.psnr.len();
                    let s = offset..offset + n;
                    offset += n;
                    Ok([gp[s.clone()].to_vec(), gi[s.clone()].to_vec(), gx[s].to_vec()])
                })
                .collect::<Result<_>>()?
        }
    };

    raw.iter()
        .zip(normalized)
        .map(|(r, [gp, gi, gx])| {
            let fused = fuse_normalized(&gp, &gi, &gx, lambda)?;
            let floor = fused.iter().copied().fold(f64::INFINITY, f64::min);
            let frames = (0..r.frame_count)
                .map(|frame| {
                    let label = r.labels.as_ref().map(|l| l[frame]);
                    match frame.checked_sub(r.first_scored) {
                        Some(i) => FrameScore {
                            frame,
                            psnr: Some(r.psnr[i]),
                            d_spatial: Some(r.d_spatial[i]),
                            d_temporal: Some(r.d_temporal[i]),
                            score: fused[i],
                            label,
                        },
                        None => FrameScore {
                            frame,
                            psnr: None,
                            d_spatial: None,
                            d_temporal: None,
                            score: floor,
                            label,
                        },
                    }
                })
                .collect();
            Ok(ScoreSeries {
                video_id: r.video_id.clone(),
                frames,
            })
        })
        .collect()
}

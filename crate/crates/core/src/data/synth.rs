//! Synthetic surveillance-like videos: bright rectangles drifting over a dark
//! background. Test videos contain one anomalous interval in which the first
//! sprite moves too fast, grows too large, or keeps reversing direction.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LABELS_DIR;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub background: u8,
    pub foreground: u8,
    /// Speed range of normal sprites in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Anomalous intervals never start before this frame.
    pub earliest_anomaly: usize,
    /// Kinds assigned to test videos in rotation.
    pub anomaly_kinds: Vec<AnomalyKind>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 8,
            test_videos: 4,
            train_frames: 24,
            test_frames: 48,
            height: 64,
            width: 64,
            sprites: 2,
            background: 20,
            foreground: 220,
            min_speed: 1.0,
            max_speed: 2.0,
            earliest_anomaly: 16,
            anomaly_kinds: vec![AnomalyKind::OverSpeed, AnomalyKind::Oversized],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyKind {
    /// Four times the normal speed.
    OverSpeed,
    /// Two and a half times the normal size.
    Oversized,
    /// Direction flips every other frame.
    Reversal,
}

/// Frames `start..=end` are anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
}

impl InjectedAnomaly {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    pub frames: Vec<GrayImage>,
    pub labels: Vec<u8>,
    pub anomaly: Option<InjectedAnomaly>,
}

#[derive(Debug, Clone, Copy)]
struct Sprite {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Sprite {
    fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = rng.gen_range(5.0..8.0);
        let h = rng.gen_range(9.0..13.0);
        let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            x: rng.gen_range(0.0..cfg.width as f64 - w),
            y: rng.gen_range(0.0..cfg.height as f64 - h),
            w,
            h,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        }
    }

    fn advance(&mut self, speed: f64, bounds: (f64, f64)) {
        self.x += self.vx * speed;
        self.y += self.vy * speed;
        let (bw, bh) = bounds;
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = self.vx.abs();
        } else if self.x + self.w > bw {
            self.x = (2.0 * (bw - self.w) - self.x).max(0.0);
            self.vx = -self.vx.abs();
        }
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = self.vy.abs();
        } else if self.y + self.h > bh {
            self.y = (2.0 * (bh - self.h) - self.y).max(0.0);
            self.vy = -self.vy.abs();
        }
    }

    /// Copy scaled about its centre.
    fn scaled(&self, f: f64) -> Self {
        Self {
            x: self.x + 0.5 * self.w * (1.0 - f),
            y: self.y + 0.5 * self.h * (1.0 - f),
            w: self.w * f,
            h: self.h * f,
            ..*self
        }
    }

    fn coverage(&self, px: f64, py: f64) -> f64 {
        let ox = ((px + 1.0).min(self.x + self.w) - px.max(self.x)).max(0.0);
        let oy = ((py + 1.0).min(self.y + self.h) - py.max(self.y)).max(0.0);
        ox * oy
    }
}

fn render(cfg: &SynthConfig, sprites: &[Sprite]) -> GrayImage {
    let (bg, fg) = (cfg.background as f64, cfg.foreground as f64);
    GrayImage::from_fn(cfg.width as u32, cfg.height as u32, |x, y| {
        let cover: f64 = sprites.iter().map(|s| s.coverage(x as f64, y as f64)).sum();
        Luma([(bg + (fg - bg) * cover.min(1.0)).round() as u8])
    })
}

/// Renders `frames` frames, applying `anomaly` to the first sprite.
pub fn render_video(
    id: &str,
    cfg: &SynthConfig,
    frames: usize,
    anomaly: Option<InjectedAnomaly>,
    rng: &mut ChaCha8Rng,
) -> SynthVideo {
    let mut sprites: Vec<Sprite> = (0..cfg.sprites.max(1)).map(|_| Sprite::random(cfg, rng)).collect();
    let bounds = (cfg.width as f64, cfg.height as f64);
    let mut images = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for f in 0..frames {
        let active = anomaly.filter(|a| a.contains(f));
        if f > 0 {
            for (i, s) in sprites.iter_mut().enumerate() {
                let speed = match active {
                    Some(a) if i == 0 && a.kind == AnomalyKind::OverSpeed => 4.0,
                    _ => 1.0,
                };
                if i == 0 && matches!(active, Some(a) if a.kind == AnomalyKind::Reversal && (f - a.start) % 2 == 0) {
                    s.vx = -s.vx;
                    s.vy = -s.vy;
                }
                s.advance(speed, bounds);
            }
        }
        let drawn: Vec<Sprite> = sprites
            .iter()
            .enumerate()
            .map(|(i, s)| match active {
                Some(a) if i == 0 && a.kind == AnomalyKind::Oversized => s.scaled(2.5),
                _ => *s,
            })
            .collect();
        images.push(render(cfg, &drawn));
        labels.push(u8::from(active.is_some()));
    }
    SynthVideo {
        id: id.to_string(),
        frames: images,
        labels,
        anomaly,
    }
}

fn write_video(dir: &Path, video: &SynthVideo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in video.frames.iter().enumerate() {
        let path = dir.join(format!("{i:04}.png"));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// What [`synth_generate`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub train_ids: Vec<String>,
    pub test: Vec<(String, Option<InjectedAnomaly>)>,
}

/// Writes the full train/test/label layout under `out_root`.
pub fn synth_generate(out_root: impl AsRef<Path>, cfg: &SynthConfig, seed: u64) -> Result<SynthSummary> {
    let root = out_root.as_ref();
    if cfg.width < 16 || cfg.height < 16 || cfg.test_frames < 2 {
        return Err(Error::Config("synthetic frames must be at least 16x16 and videos 2 frames long".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SynthSummary {
        train_ids: Vec::new(),
        test: Vec::new(),
    };
    for v in 0..cfg.train_videos {
        let id = format!("{v:02}");
        let mut vrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let video = render_video(&id, cfg, cfg.train_frames, None, &mut vrng);
        write_video(&root.join("train").join(&id), &video)?;
        summary.train_ids.push(id);
    }
    let labels_dir = root.join(LABELS_DIR);
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    for v in 0..cfg.test_videos {
        let id = format!("{v:02}");
        let mut vrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let anomaly = anomaly_for(cfg, v, &mut vrng);
        let video = render_video(&id, cfg, cfg.test_frames, anomaly, &mut vrng);
        write_video(&root.join("test").join(&id), &video)?;
        let text: String = video.labels.iter().map(|l| format!("{l}\n")).collect();
        let path = labels_dir.join(format!("{id}.csv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        summary.test.push((id, anomaly));
    }
    Ok(summary)
}

fn anomaly_for(cfg: &SynthConfig, video: usize, rng: &mut ChaCha8Rng) -> Option<InjectedAnomaly> {
    let kind = *cfg.anomaly_kinds.get(video % cfg.anomaly_kinds.len().max(1))?;
    let frames = cfg.test_frames;
    if frames <= cfg.earliest_anomaly + 4 {
        return None;
    }
    let len = rng.gen_range(10..=16).min(frames - cfg.earliest_anomaly - 2);
    let start = rng.gen_range(cfg.earliest_anomaly..=frames - len - 1);
    Some(InjectedAnomaly {
        kind,
        start,
        end: start + len - 1,
    })
}

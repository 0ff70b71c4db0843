//! Dataset layout, clip windowing and frame normalization.
//!
//! A dataset root holds `train/<video>/<index>.png`, `test/<video>/<index>.png`
//! and `test_labels/<video>.csv` (one `0`/`1` line per frame). Frame order is
//! the lexicographic order of file names.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::DynamicImage;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub const LABELS_DIR: &str = "test_labels";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_labels(path: &Path, video: &str) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| match line.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Dataset(format!(
                "video `{video}`: label line {} is `{other}`, expected 0 or 1",
                i + 1
            ))),
        })
        .collect()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

/// An unlabeled video made of the PNG files in `dir`.
pub fn video_from_dir(dir: &Path) -> Result<VideoEntry> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing frame directory {}", dir.display())));
    }
    Ok(VideoEntry {
        id: file_name(dir),
        frames: png_files(dir)?,
        labels: None,
    })
}

/// Enumerates the videos of one split in id order.
pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!("missing split directory {}", split_dir.display())));
    }
    let labels_dir = root.join(LABELS_DIR);
    let mut videos = Vec::new();
    for dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
        let id = file_name(&dir);
        let frames = png_files(&dir)?;
        let label_path = labels_dir.join(format!("{id}.csv"));
        let labels = if split == Split::Test && label_path.is_file() {
            let labels = parse_labels(&label_path, &id)?;
            if labels.len() != frames.len() {
                return Err(Error::Dataset(format!(
                    "video `{id}` has {} frames but {} labels",
                    frames.len(),
                    labels.len()
                )));
            }
            Some(labels)
        } else {
            None
        };
        videos.push(VideoEntry { id, frames, labels });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        videos,
    })
}

/// Target geometry of loaded frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

/// Bilinear resize to `spec`, then `x/127.5 − 1`; output `[H, W, ch]`.
pub fn normalize_frame(img: &DynamicImage, spec: FrameSpec) -> Result<Tensor> {
    let (w, h) = (spec.width as u32, spec.height as u32);
    let data: Vec<f64> = match spec.channels {
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (w, h) {
                g = imageops::resize(&g, w, h, FilterType::Triangle);
            }
            g.into_raw().into_iter().map(to_signed).collect()
        }
        3 => {
            let mut c = img.to_rgb8();
            if c.dimensions() != (w, h) {
                c = imageops::resize(&c, w, h, FilterType::Triangle);
            }
            c.into_raw().into_iter().map(to_signed).collect()
        }
        n => return Err(Error::Config(format!("unsupported channel count {n}"))),
    };
    Tensor::new(vec![spec.height, spec.width, spec.channels], data)
}

fn to_signed(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn load_frame(path: &Path, spec: FrameSpec) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    normalize_frame(&img, spec)
}

pub fn load_video(video: &VideoEntry, spec: FrameSpec) -> Result<Vec<Tensor>> {
    video.frames.iter().map(|p| load_frame(p, spec)).collect()
}

/// One training or scoring window.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    /// `[t−1, H, W, ch]`
    pub input_frames: Tensor,
    /// `[t−1, H, W, ch]`
    pub input_diffs: Tensor,
    pub target_frame: Tensor,
    pub target_diff: Tensor,
    pub video_id: String,
    /// Index of the target frame within its video.
    pub end_frame_index: usize,
}

impl ClipBatch {
    /// The most recent input frame.
    pub fn last_frame(&self) -> Tensor {
        self.input_frames.index_outer(self.input_frames.shape()[0] - 1)
    }
}

/// Stride-1 windows `f_j..=f_{j+t}`: inputs `f_{j+1}..f_{j+t−1}` with their
/// backward differences, target `f_{j+t}`. Yields `F − t` clips; shorter
/// videos yield none.
pub fn make_clips(video_id: &str, frames: &[Tensor], t: usize) -> Result<Vec<ClipBatch>> {
    if t < 2 {
        return Err(Error::Config(format!("clip length must be >= 2, got {t}")));
    }
    if frames.len() < t + 1 {
        warn!("video `{video_id}` has {} frames, needs {}; skipped", frames.len(), t + 1);
        return Ok(Vec::new());
    }
    for f in &frames[1..] {
        frames[0].expect_same_shape(f)?;
    }
    let diff = |i: usize| frames[i].zip_map(&frames[i - 1], |a, b| a - b);
    (0..frames.len() - t)
        .map(|j| {
            let inputs: Vec<&Tensor> = frames[j + 1..j + t].iter().collect();
            let diffs = (j + 1..j + t).map(diff).collect::<Result<Vec<_>>>()?;
            Ok(ClipBatch {
                input_frames: Tensor::stack(&inputs)?,
                input_diffs: Tensor::stack(&diffs.iter().collect::<Vec<_>>())?,
                target_frame: frames[j + t].clone(),
                target_diff: diff(j + t)?,
                video_id: video_id.to_string(),
                end_frame_index: j + t,
            })
        })
        .collect()
}

/// Lays clips out as one network batch.
pub fn stack_clips(clips: &[&ClipBatch]) -> Result<Batch> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("cannot batch zero clips".into()));
    }
    let cat = |f: fn(&ClipBatch) -> &Tensor| Tensor::concat_batch(&clips.iter().map(|c| f(c)).collect::<Vec<_>>());
    let lasts: Vec<Tensor> = clips.iter().map(|c| c.last_frame()).collect();
    Ok(Batch {
        frames: cat(|c| &c.input_frames)?,
        diffs: cat(|c| &c.input_diffs)?,
        target_frames: Tensor::stack(&clips.iter().map(|c| &c.target_frame).collect::<Vec<_>>())?,
        target_diffs: Tensor::stack(&clips.iter().map(|c| &c.target_diff).collect::<Vec<_>>())?,
        last_frames: Tensor::stack(&lasts.iter().collect::<Vec<_>>())?,
    })
}

//! Fixtures shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stvad_core::data::{self, ClipBatch};
use stvad_core::network::ModelConfig;
use stvad_core::{MemoryBank, RunConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `k` random queries against a fresh `m`-item bank of dimension `c`.
pub fn memory_case(k: usize, m: usize, c: usize, seed: u64) -> (MemoryBank, Tensor) {
    let mut r = rng(seed);
    let bank = MemoryBank::init(m, c, r.gen()).expect("valid bank size");
    (bank, random_tensor(&[k, c], &mut r))
}

/// A run configuration for a small model of the given size.
pub fn small_run(size: usize, channels: Vec<usize>) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            height: size,
            width: size,
            levels: channels.len(),
            channels,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Training clips cut from a drifting sinusoid video.
pub fn wave_clips(run: &RunConfig, frames: usize) -> Vec<ClipBatch> {
    let (h, w) = (run.model.height, run.model.width);
    let video: Vec<Tensor> = (0..frames)
        .map(|f| {
            Tensor::from_fn(&[h, w, 1], |i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (0.3 * x + 0.2 * y + 0.5 * f as f64).sin()
            })
        })
        .collect();
    data::make_clips("bench", &video, run.model.clip_len).expect("clips")
}

//! Dual-stream (appearance / motion) memory-augmented predictive autoencoder
//! for video anomaly detection.
//!
//! The spatial stream predicts the next frame from the preceding frames, the
//! temporal stream predicts the next frame difference from the preceding
//! differences. Both encoders use residual temporal shift modules, both
//! decoders use residual channel attention, and every skip connection plus
//! the bottleneck passes through a memory of normal prototypes. Frames are
//! scored by fusing prediction PSNR with the distance of the bottleneck
//! features to their nearest memory items.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod memory;
pub mod network;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scoring;
pub mod tensor;

pub use config::RunConfig;
pub use data::{ClipBatch, DatasetManifest, Split};
pub use error::{Error, Result};
pub use memory::MemoryBank;
pub use network::{FusionMode, Model, ModelConfig};
pub use pipeline::{EvalConfig, EvalReport, TrainConfig, TrainState};
pub use scoring::ScoreSeries;
pub use tensor::Tensor;

//! Training loop, evaluation over a labeled test split and frame-level AUC.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{GrayImage, Luma};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, ClipBatch, FrameSpec, Split, VideoEntry};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::losses::{self, DiscretizationParams, Reduction};
use crate::network::{Batch, Model, ModelConfig, Subnet, SubnetOutput, SubnetVars};
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::params::{BnIds, Bound, Mode, ParamId};
use crate::scoring::{self, DistanceScope, NormalizationScope, PsnrConvention, RawScores, ScoreSeries};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    pub square_gap: bool,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            learning_rate: 2e-4,
            adam: AdamConfig::default(),
            reduction: Reduction::Mean,
            square_gap: false,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Weight of the PSNR term in the fused score.
    pub lambda: f64,
    pub psnr_convention: PsnrConvention,
    pub normalization: NormalizationScope,
    pub distance: DistanceScope,
    pub batch_size: usize,
    /// Write `|Ŷ − Y|` images next to the score files.
    pub error_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            psnr_convention: PsnrConvention::Paper,
            normalization: NormalizationScope::PerVideo,
            distance: DistanceScope::Bottleneck,
            batch_size: 8,
            error_maps: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training or to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub run: RunConfig,
    pub model: Model,
    pub adam: [AdamState; 2],
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.validate()?;
        let model = Model::build(run.model.clone(), seed)?;
        let adam = [AdamState::new(&model.spatial.params), AdamState::new(&model.temporal.params)];
        let lr = run.train.learning_rate;
        Ok(Self {
            run,
            model,
            adam,
            step: 0,
            epoch: 0,
            lr,
            seed,
        })
    }

    pub fn frame_spec(&self) -> FrameSpec {
        frame_spec(&self.model.config)
    }
}

pub fn frame_spec(cfg: &ModelConfig) -> FrameSpec {
    FrameSpec {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.image_channels,
    }
}

pub const LOSS_CSV_HEADER: &str = "step,lp1,ls1,lp2,ls2,total,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lp1: f64,
    pub ls1: f64,
    pub lp2: f64,
    pub ls2: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lp1, self.ls1, self.lp2, self.ls2, self.total, self.lr
        )
    }
}

/// Prediction and mean discretization loss of one stream.
struct StreamLoss {
    prediction: Var,
    discretization: Var,
    vars: SubnetVars,
}

#[allow(clippy::too_many_arguments)]
fn stream_loss(
    g: &mut Graph,
    p: &mut Bound,
    subnet: &Subnet,
    config: &ModelConfig,
    input: &Tensor,
    target: &Tensor,
    train: &TrainConfig,
    disc: &DiscretizationParams,
) -> Result<StreamLoss> {
    let x = g.constant(input.clone());
    let vars = subnet.graph(g, p, config, x)?;
    let y = g.constant(target.clone());
    let prediction = g.mse(vars.prediction, y, train.reduction == Reduction::Mean)?;
    let discretization = if subnet.banks.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let w = 1.0 / subnet.banks.len() as f64;
        let terms = vars
            .features
            .iter()
            .zip(&subnet.banks)
            .map(|(&f, bank)| Ok((losses::discretization_node(g, f, bank, disc)?, w)))
            .collect::<Result<Vec<_>>>()?;
        g.lin_comb(&terms)?
    };
    Ok(StreamLoss {
        prediction,
        discretization,
        vars,
    })
}

/// The training objective of one batch, built on its own graph.
pub struct Objective {
    pub graph: Graph,
    pub lp1: Var,
    pub ls1: Var,
    pub lp2: Var,
    pub ls2: Var,
    pub total: Var,
    /// Trainable parameters of the spatial and temporal subnetworks.
    pub params: [Vec<(ParamId, Var)>; 2],
    /// Memory queries per module of each subnetwork.
    pub features: [Vec<Var>; 2],
    pub bn_stats: [Vec<(BnIds, BatchStats)>; 2],
}

impl Objective {
    pub fn build(model: &Model, run: &RunConfig, batch: &Batch, mode: Mode, requires_grad: bool) -> Result<Self> {
        let train = run.train;
        let mut disc = DiscretizationParams::from_weights(&run.weights);
        disc.square_gap = train.square_gap;
        let cfg = &model.config;
        let mut g = Graph::new();
        let mut ps = model.spatial.params.bind(&mut g, mode, requires_grad);
        let mut pt = model.temporal.params.bind(&mut g, mode, requires_grad);
        let s = stream_loss(&mut g, &mut ps, &model.spatial, cfg, &batch.frames, &batch.target_frames, &train, &disc)?;
        let t = stream_loss(&mut g, &mut pt, &model.temporal, cfg, &batch.diffs, &batch.target_diffs, &train, &disc)?;
        let total = losses::total_loss_node(
            &mut g,
            (s.prediction, s.discretization),
            (t.prediction, t.discretization),
            &run.weights,
        )?;
        Ok(Self {
            lp1: s.prediction,
            ls1: s.discretization,
            lp2: t.prediction,
            ls2: t.discretization,
            total,
            params: [ps.trainable_vars(), pt.trainable_vars()],
            features: [s.vars.features, t.vars.features],
            bn_stats: [ps.into_bn_stats(), pt.into_bn_stats()],
            graph: g,
        })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.graph.value(v).data()[0]
    }
}

/// Forward, backward, Adam update and memory update on one batch.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossRecord> {
    let train = state.run.train;
    let obj = Objective::build(&state.model, &state.run, batch, Mode::Train, true)?;
    let record = LossRecord {
        step: state.step,
        lp1: obj.scalar(obj.lp1),
        ls1: obj.scalar(obj.ls1),
        lp2: obj.scalar(obj.lp2),
        ls2: obj.scalar(obj.ls2),
        total: obj.scalar(obj.total),
        lr,
    };
    for (name, v) in [
        ("lp1", record.lp1),
        ("ls1", record.ls1),
        ("lp2", record.lp2),
        ("ls2", record.ls2),
        ("total", record.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name,
                step: state.step,
            });
        }
    }

    let mut grads = obj.graph.backward(obj.total)?;
    let Objective {
        graph,
        params,
        features,
        bn_stats,
        ..
    } = obj;
    let momentum = train.bn_momentum;
    let [adam_s, adam_t] = &mut state.adam;
    let [spatial, temporal] = state.model.subnets_mut();
    for ((((subnet, adam), vars), bn), queued) in [spatial, temporal]
        .into_iter()
        .zip([adam_s, adam_t])
        .zip(params)
        .zip(bn_stats)
        .zip(features)
    {
        let g: Vec<(ParamId, Tensor)> = vars
            .into_iter()
            .filter_map(|(id, v)| grads.take(v).map(|gr| (id, gr)))
            .collect();
        adam.step(&mut subnet.params, &g, lr, &train.adam)?;
        subnet.params.apply_bn_stats(&bn, momentum);
        for (bank, f) in subnet.banks.iter_mut().zip(queued) {
            let q = graph.value(f);
            let c = bank.dim();
            bank.update(&q.clone().reshape(&[q.len() / c, c])?)?;
        }
    }
    state.step += 1;
    state.lr = lr;
    Ok(record)
}

pub fn load_train_clips(root: &Path, cfg: &ModelConfig) -> Result<Vec<ClipBatch>> {
    let manifest = data::load_dataset(root, Split::Train)?;
    let spec = frame_spec(cfg);
    let mut clips = Vec::new();
    for v in &manifest.videos {
        let frames = data::load_video(v, spec)?;
        clips.extend(data::make_clips(&v.id, &frames, cfg.clip_len)?);
    }
    if clips.is_empty() {
        return Err(Error::Dataset(format!(
            "no training clips of length {} under {}",
            cfg.clip_len + 1,
            root.join(Split::Train.dir_name()).display()
        )));
    }
    Ok(clips)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

/// Trains a fresh model on `clips` for the configured epochs with a
/// deterministic per-epoch shuffle. When `out_dir` is set the loss log is
/// written there and a checkpoint is saved after every epoch.
pub fn train_clips(run: &RunConfig, seed: u64, clips: &[ClipBatch], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut state = TrainState::new(run.clone(), seed)?;
    let train = run.train;
    let per_epoch = clips.len().div_ceil(train.batch_size);
    let total = per_epoch * train.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG_FILE);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let started = Instant::now();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let picked: Vec<&ClipBatch> = chunk.iter().map(|&i| &clips[i]).collect();
            let batch = data::stack_clips(&picked)?;
            let lr = cosine_lr(train.learning_rate, state.step, total);
            let record = train_step(&mut state, &batch, lr)?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(record);
        }
        state.epoch = epoch + 1;
        let last = log.last().expect("every epoch has a batch");
        info!(
            "epoch {}/{} step {} total {:.5} lp1 {:.5} lp2 {:.5} ({:.1}s)",
            epoch + 1,
            train.epochs,
            state.step,
            last.total,
            last.lp1,
            last.lp2,
            started.elapsed().as_secs_f64()
        );
        if let Some((f, path)) = log_file.as_mut() {
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
            crate::checkpoint::save(&path.with_file_name(CHECKPOINT_FILE), &state)?;
        }
    }
    Ok(TrainOutcome { state, log })
}

/// Loads the train split under `data_root` and runs [`train_clips`].
pub fn train(run: &RunConfig, seed: u64, data_root: &Path, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let clips = load_train_clips(data_root, &run.model)?;
    info!("training on {} clips", clips.len());
    train_clips(run, seed, &clips, out_dir)
}

/// Mann-Whitney AUC: probability that an anomalous frame outscores a normal
/// one, counting ties as one half.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("AUC needs both normal and anomalous frames".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-clip measurements and optional error maps for one video.
pub struct VideoScores {
    pub raw: RawScores,
    /// `(frame index, |Ŷ − Y| in [0, 2])`
    pub error_maps: Vec<(usize, Tensor)>,
}

fn stream_distance(subnet: &Subnet, out: &SubnetOutput, sample: usize, scope: DistanceScope) -> Result<f64> {
    if subnet.banks.is_empty() {
        return Ok(0.0);
    }
    let modules: Vec<usize> = match scope {
        DistanceScope::Bottleneck => vec![subnet.banks.len() - 1],
        DistanceScope::AllModules => (0..subnet.banks.len()).collect(),
    };
    let mut total = 0.0;
    for &i in &modules {
        let f = out.level_features[i].index_outer(sample);
        let c = subnet.banks[i].dim();
        let k = f.len() / c;
        total += scoring::memory_distance(&f.reshape(&[k, c])?, &subnet.banks[i])?;
    }
    Ok(total / modules.len() as f64)
}

/// PSNR and memory distances for every frame of `frames` that has a full window.
pub fn score_video(
    model: &Model,
    eval: &EvalConfig,
    id: &str,
    frames: &[Tensor],
    labels: Option<Vec<u8>>,
) -> Result<Option<VideoScores>> {
    let t = model.config.clip_len;
    let clips = data::make_clips(id, frames, t)?;
    if clips.is_empty() {
        return Ok(None);
    }
    let n = clips.len();
    let mut raw = RawScores {
        video_id: id.to_string(),
        frame_count: frames.len(),
        first_scored: t,
        psnr: Vec::with_capacity(n),
        d_spatial: Vec::with_capacity(n),
        d_temporal: Vec::with_capacity(n),
        labels,
    };
    let mut error_maps = Vec::new();
    for chunk in clips.chunks(eval.batch_size) {
        let batch = data::stack_clips(&chunk.iter().collect::<Vec<_>>())?;
        let out = model.dual_forward(&batch, Mode::Eval)?;
        for (b, clip) in chunk.iter().enumerate() {
            let pred = out.fused.index_outer(b);
            let target = &clip.target_frame;
            raw.psnr.push(scoring::psnr(
                &scoring::to_unit_range(&pred),
                &scoring::to_unit_range(target),
                eval.psnr_convention,
            )?);
            raw.d_spatial.push(stream_distance(&model.spatial, &out.spatial, b, eval.distance)?);
            raw.d_temporal.push(stream_distance(&model.temporal, &out.temporal, b, eval.distance)?);
            if eval.error_maps {
                error_maps.push((clip.end_frame_index, pred.zip_map(target, |a, b| (a - b).abs())?));
            }
        }
    }
    Ok(Some(VideoScores { raw, error_maps }))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub series: Vec<ScoreSeries>,
    /// `None` when the labeled frames do not contain both classes.
    pub frame_auc: Option<f64>,
    pub frames: usize,
    pub labeled_frames: usize,
    pub seconds: f64,
}

impl EvalReport {
    pub fn to_text(&self, lambda: f64) -> String {
        let auc = self.frame_auc.map(|a| a.to_string()).unwrap_or_else(|| "nan".into());
        let fps = if self.seconds > 0.0 { self.frames as f64 / self.seconds } else { 0.0 };
        format!(
            "frame_auc={auc}\nvideos={}\nframes={}\nlabeled_frames={}\nlambda={lambda}\neval_seconds={:.3}\nfps={:.2}\n",
            self.series.len(),
            self.frames,
            self.labeled_frames,
            self.seconds,
            fps
        )
    }
}

fn save_error_map(path: &Path, err: &Tensor) -> Result<()> {
    let [h, w, c] = match err.shape() {
        &[h, w, c] => [h, w, c],
        s => return Err(Error::Shape(format!("error map must be [H, W, C], got {s:?}"))),
    };
    let d = err.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let base = (y as usize * w + x as usize) * c;
        let mean = d[base..base + c].iter().sum::<f64>() / c as f64;
        Luma([(mean * 127.5).round().clamp(0.0, 255.0) as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub const SCORES_DIR: &str = "scores";
pub const REPORT_FILE: &str = "report.txt";

/// Scores every test video, writes `scores/<id>.csv` and `report.txt` under
/// `out_dir` when given, and computes the frame-level AUC over labeled videos.
pub fn evaluate(model: &Model, eval: &EvalConfig, data_root: &Path, out_dir: Option<&Path>) -> Result<EvalReport> {
    eval.validate()?;
    let manifest = data::load_dataset(data_root, Split::Test)?;
    evaluate_videos(model, eval, &manifest.videos, out_dir)
}

pub fn evaluate_videos(
    model: &Model,
    eval: &EvalConfig,
    videos: &[VideoEntry],
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let spec = frame_spec(&model.config);
    let mut raws = Vec::new();
    let mut maps: Vec<(String, Vec<(usize, Tensor)>)> = Vec::new();
    for v in videos {
        let frames = data::load_video(v, spec)?;
        match score_video(model, eval, &v.id, &frames, v.labels.clone())? {
            Some(s) => {
                raws.push(s.raw);
                maps.push((v.id.clone(), s.error_maps));
            }
            None => warn!("video `{}` is too short to score; skipped", v.id),
        }
    }
    let series = scoring::assemble_series(&raws, eval.lambda, eval.normalization)?;
    let seconds = started.elapsed().as_secs_f64();

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &series {
        match s.labels() {
            Some(l) => {
                scores.extend(s.scores());
                labels.extend(l);
            }
            None => warn!("video `{}` has no labels; excluded from AUC", s.video_id),
        }
    }
    let frame_auc = match compute_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(e) => {
            warn!("frame AUC undefined: {e}");
            None
        }
    };
    let report = EvalReport {
        frames: series.iter().map(|s| s.frames.len()).sum(),
        labeled_frames: labels.len(),
        series,
        frame_auc,
        seconds,
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report, eval.lambda)?;
        for (id, video_maps) in &maps {
            if video_maps.is_empty() {
                continue;
            }
            let map_dir = dir.join("error_maps").join(id);
            fs::create_dir_all(&map_dir).map_err(|e| Error::io(&map_dir, e))?;
            for (frame, err) in video_maps {
                save_error_map(&map_dir.join(format!("{frame:04}.png")), err)?;
            }
        }
    }
    Ok(report)
}

pub fn score_csv_path(out_dir: &Path, video_id: &str) -> PathBuf {
    out_dir.join(SCORES_DIR).join(format!("{video_id}.csv"))
}

fn write_report(dir: &Path, report: &EvalReport, lambda: f64) -> Result<()> {
    let scores = dir.join(SCORES_DIR);
    fs::create_dir_all(&scores).map_err(|e| Error::io(&scores, e))?;
    for s in &report.series {
        let path = score_csv_path(dir, &s.video_id);
        fs::write(&path, s.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report.to_text(lambda)).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.9, 0.1, 0.8, 0.2], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(compute_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(compute_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(compute_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_complement() {
        let s = [0.3, 0.1, 0.7, 0.2, 0.9];
        let l = [0, 1, 1, 0, 1];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(compute_auc(&s, &l).unwrap() + compute_auc(&neg, &l).unwrap(), 1.0, epsilon = 1e-12);
    }

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            height: 16,
            width: 16,
            clip_len: 3,
            levels: 2,
            channels: vec![4, 8],
            memory_items: 4,
            reduction_ratio: 2,
            ..ModelConfig::default()
        };
        run.train.batch_size = 2;
        run.train.epochs = 1;
        run
    }

    fn moving_clips(n: usize) -> Vec<ClipBatch> {
        let frames: Vec<Tensor> = (0..n + 3)
            .map(|f| Tensor::from_fn(&[16, 16, 1], |i| if (i + f) % 16 < 4 { 0.8 } else { -0.8 }))
            .collect();
        data::make_clips("v", &frames, 3).unwrap()
    }

    #[test]
    fn train_step_keeps_banks_unit_norm_and_logs_components() {
        let run = tiny_run();
        let mut state = TrainState::new(run, 0).unwrap();
        let clips = moving_clips(2);
        let batch = data::stack_clips(&clips.iter().collect::<Vec<_>>()).unwrap();
        let rec = train_step(&mut state, &batch, 1e-3).unwrap();
        assert!(rec.ls1 >= 0.0 && rec.ls2 >= 0.0);
        assert_abs_diff_eq!(
            rec.total,
            0.5 * (rec.lp1 + 0.1 * rec.ls1) + 0.5 * (rec.lp2 + 0.1 * rec.ls2),
            epsilon = 1e-12
        );
        for s in state.model.subnets() {
            for bank in &s.banks {
                for m in 0..bank.len() {
                    let n: f64 = bank.item(m).iter().map(|v| v * v).sum();
                    assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
                }
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let run = tiny_run();
        let clips = moving_clips(5);
        let a = train_clips(&run, 4, &clips, None).unwrap();
        let b = train_clips(&run, 4, &clips, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.state, b.state);
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn perfect_prediction_hits_cap_and_zero_normalized_psnr() {
        let raw = RawScores {
            video_id: "v".into(),
            frame_count: 4,
            first_scored: 1,
            psnr: vec![scoring::PSNR_CAP; 3],
            d_spatial: vec![0.0; 3],
            d_temporal: vec![0.0; 3],
            labels: None,
        };
        let s = scoring::assemble_series(&[raw], 0.8, NormalizationScope::PerVideo).unwrap();
        assert!(s[0].frames.iter().all(|f| f.score == 0.8));
    }
}

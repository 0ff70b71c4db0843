//! `stvad`: synthesize a dataset, train, evaluate and score videos.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and
//! missing inputs, 1 for failures while running.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use stvad_core::data::synth::{self, SynthConfig};
use stvad_core::{checkpoint, data, pipeline, scoring, Error, RunConfig};

const SEED_ENV: &str = "STVAD_SEED";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(name = "stvad", version, about = "Dual-stream memory-augmented video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint, loss log and effective config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score the labeled test split and report the frame-level AUC.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        error_maps: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score one directory of frames and print the CSV on standard output.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(base: RunConfig, common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply(&text)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn resolve_seed(cfg: &mut RunConfig, flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        cfg.seed = Some(s);
    }
    if cfg.seed.is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
            cfg.seed = Some(s);
        }
    }
    Ok(*cfg.seed.get_or_insert(0))
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    slot.as_deref()
        .ok_or_else(|| usage(format!("missing --{flag} (or `{flag}` in the config file)")))
}

fn existing<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    let p = required(slot, flag)?;
    if !p.exists() {
        return Err(usage(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .and_then(|_| fs::write(out.join(CONFIG_ECHO), cfg.to_text()))
        .with_context(|| format!("writing {}", out.join(CONFIG_ECHO).display()))
        .map_err(runtime)
}

/// Loads a checkpoint and applies file/flag settings on top of its stored
/// configuration; settings may not change the architecture.
fn checkpoint_config(
    cfg_slot: &Option<PathBuf>,
    common: &Common,
) -> Result<(pipeline::TrainState, RunConfig), Failure> {
    let path = existing(cfg_slot, "checkpoint")?;
    let state = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(runtime)?;
    let cfg = load_config(state.run.clone(), common)?;
    if cfg.model != state.model.config {
        return Err(usage("config changes the model architecture stored in the checkpoint"));
    }
    Ok((state, cfg))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { out, seed, common } => {
            let mut cfg = load_config(RunConfig::default(), &common)?;
            override_path(&mut cfg.out, out);
            let seed = resolve_seed(&mut cfg, seed)?;
            let out = required(&cfg.out, "out")?;
            let summary = synth::synth_generate(out, &SynthConfig::default(), seed)?;
            info!(
                "wrote {} train and {} test videos to {}",
                summary.train_ids.len(),
                summary.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            seed,
            epochs,
            learning_rate,
            batch_size,
            common,
        } => {
            let mut cfg = load_config(RunConfig::default(), &common)?;
            override_path(&mut cfg.data, data);
            override_path(&mut cfg.out, out);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            let seed = resolve_seed(&mut cfg, seed)?;
            cfg.validate()?;
            let data = existing(&cfg.data, "data")?.to_path_buf();
            let out = required(&cfg.out, "out")?.to_path_buf();
            echo_config(&out, &cfg)?;
            let outcome = pipeline::train(&cfg, seed, &data, Some(&out))?;
            info!(
                "trained {} steps; checkpoint at {}",
                outcome.state.step,
                out.join(pipeline::CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            lambda,
            error_maps,
            common,
        } => {
            let mut slot = None;
            override_path(&mut slot, checkpoint);
            if slot.is_none() {
                slot = load_config(RunConfig::default(), &common)?.checkpoint;
            }
            let (state, mut cfg) = checkpoint_config(&slot, &common)?;
            cfg.checkpoint = slot;
            override_path(&mut cfg.data, data);
            override_path(&mut cfg.out, out);
            if let Some(l) = lambda {
                cfg.eval.lambda = l;
            }
            cfg.eval.error_maps |= error_maps;
            cfg.validate()?;
            let data = existing(&cfg.data, "data")?.to_path_buf();
            let out = required(&cfg.out, "out")?.to_path_buf();
            echo_config(&out, &cfg)?;
            let report = pipeline::evaluate(&state.model, &cfg.eval, &data, Some(&out))?;
            match report.frame_auc {
                Some(auc) => info!("frame_auc={auc:.4} over {} labeled frames", report.labeled_frames),
                None => info!("frame AUC undefined"),
            }
            Ok(())
        }
        Command::Score {
            checkpoint,
            frames,
            lambda,
            common,
        } => {
            let mut slot = None;
            override_path(&mut slot, checkpoint);
            if slot.is_none() {
                slot = load_config(RunConfig::default(), &common)?.checkpoint;
            }
            let (state, mut cfg) = checkpoint_config(&slot, &common)?;
            override_path(&mut cfg.frames, frames);
            if let Some(l) = lambda {
                cfg.eval.lambda = l;
            }
            cfg.validate()?;
            let dir = existing(&cfg.frames, "frames")?;
            let video = data::video_from_dir(dir)?;
            let frames = data::load_video(&video, state.frame_spec())?;
            let scores = pipeline::score_video(&state.model, &cfg.eval, &video.id, &frames, None)?
                .ok_or_else(|| {
                    runtime(anyhow!(
                        "{} frames in {} is too few for clip length {}",
                        frames.len(),
                        dir.display(),
                        state.model.config.clip_len
                    ))
                })?;
            let series = scoring::assemble_series(&[scores.raw], cfg.eval.lambda, cfg.eval.normalization)?;
            std::io::stdout()
                .write_all(series[0].to_csv().as_bytes())
                .context("writing scores")
                .map_err(runtime)?;
            Ok(())
        }
    }
}

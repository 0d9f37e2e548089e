use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{accumulate_gradients, StepMetrics, TrainConfig, TrainState};
use crate::checkpoint::Checkpoint;
use crate::data::{pair_batch, sample_seed, Dataset};
use crate::error::{Error, Result};

/// Output layout of a run: `metrics.jsonl` (deterministic),
/// `timing.jsonl` (wall clock) and `checkpoints/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(Self { root })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.jsonl")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.ckpt")
    }

    /// Most recent per-epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(self.root.join("checkpoints"))? {
            let path = entry?.path();
            let epoch = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("epoch_"))
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(e) = epoch {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    pub fn read_metrics(&self) -> Result<Vec<StepMetrics>> {
        read_metrics(&self.metrics_path())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where logs and checkpoints go; nothing is written when unset.
    pub dir: Option<RunDir>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after_epoch: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: TrainState,
    /// Metrics of the steps taken by this invocation.
    pub metrics: Vec<StepMetrics>,
    pub interrupted: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
        seed,
        epoch,
        u64::MAX,
    )));
    idx
}

/// Trains on `data` for `cfg.epochs` epochs. Each epoch visits a seeded
/// permutation of the samples, dropping the incomplete last step. A
/// checkpoint is written after every epoch and at the end; on divergence
/// the error is returned and earlier checkpoints stay in place.
pub fn run_training(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if data.input_dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "dataset has input dimension {}, model expects {}",
            data.input_dim(),
            cfg.model.input_dim
        )));
    }
    let spe = cfg.steps_per_epoch(data.len())?;
    let mut state = match &opts.resume {
        Some(path) => Checkpoint::load(path)?.restore(cfg)?,
        None => TrainState::new(cfg, spe)?,
    };
    if state.schedule.total != cfg.epochs * spe {
        return Err(Error::Config(format!(
            "checkpoint schedule covers {} steps, this run needs {}",
            state.schedule.total,
            cfg.epochs * spe
        )));
    }

    let mut metrics_file = None;
    let mut timing_file = None;
    if let Some(dir) = &opts.dir {
        // keep only log lines from before the resume point
        let keep: Vec<String> = if opts.resume.is_some() && dir.metrics_path().exists() {
            let step = state.schedule.step;
            read_metrics(&dir.metrics_path())?
                .into_iter()
                .filter(|m| m.step < step)
                .map(|m| serde_json::to_string(&m))
                .collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        let mut f = File::create(dir.metrics_path())?;
        for l in keep {
            writeln!(f, "{l}")?;
        }
        f.flush()?;
        metrics_file = Some(f);
        timing_file = Some(
            OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(dir.timing_path())?,
        );
    }

    let per_micro = cfg.batch_size;
    let mut metrics = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for s in 0..spe as usize {
            let started = Instant::now();
            let micro = (0..cfg.accumulation_steps)
                .map(|m| {
                    let start = (s * cfg.accumulation_steps + m) * per_micro;
                    pair_batch(
                        data,
                        &order[start..start + per_micro],
                        &cfg.augment,
                        cfg.seed,
                        epoch,
                        cfg.policy,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let m = accumulate_gradients(&mut state, cfg, &micro)?;
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&m)?)?;
                f.flush()?;
            }
            if let Some(f) = timing_file.as_mut() {
                let ms = started.elapsed().as_secs_f64() * 1e3;
                writeln!(f, "{{\"step\":{},\"wall_ms\":{ms:.3}}}", m.step)?;
            }
            metrics.push(m);
        }
        state.epoch = epoch + 1;
        if let Some(dir) = &opts.dir {
            Checkpoint::from_state(&state, cfg)?.save(&dir.epoch_checkpoint(state.epoch))?;
        }
        if opts.stop_after_epoch == Some(state.epoch) && state.epoch < cfg.epochs {
            return Ok(RunSummary {
                state,
                metrics,
                interrupted: true,
            });
        }
    }
    if let Some(dir) = &opts.dir {
        Checkpoint::from_state(&state, cfg)?.save(&dir.final_checkpoint())?;
    }
    Ok(RunSummary {
        state,
        metrics,
        interrupted: false,
    })
}

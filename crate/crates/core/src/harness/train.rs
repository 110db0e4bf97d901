//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::synthbench::{sample_seed, Dataset};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{Masking, Model, Pair};
use super::optim::AdamW;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const NEIGHBORS_FILE: &str = "neighbors.jsonl";

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
    /// Also dump predicted false negatives of every step.
    pub dump_neighbors: bool,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunDir {
            dir: dir.into(),
            dump_neighbors: false,
        }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub lr: f64,
    pub excluded_pairs: usize,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
}

/// Dataset indices of the batch used at `step` (distinct within a batch).
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ 0x6261_7463_68, step as usize));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..batch {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(batch);
    idx
}

/// Trains from a fresh initialization of `cfg`.
pub fn train(cfg: &TrainConfig, data: &Dataset, run: &RunDir) -> Result<TrainOutcome> {
    let model = Model::new(cfg)?;
    let opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    fs::create_dir_all(&run.dir)?;
    File::create(run.metrics())?;
    if run.dump_neighbors {
        File::create(run.dir.join(NEIGHBORS_FILE))?;
    }
    let start = Checkpoint::capture(&model, &opt, 0);
    start.save(&run.checkpoint())?;
    continue_training(start, cfg.steps, data, run)
}

/// Continues a run from `ckpt` until `until` steps are done, appending to
/// the metrics stream.
pub fn continue_training(ckpt: Checkpoint, until: u64, data: &Dataset, run: &RunDir) -> Result<TrainOutcome> {
    let mut model = ckpt.model()?;
    let mut opt = ckpt.optimizer.clone();
    let cfg = model.config.clone();
    if data.len() < cfg.batch {
        return Err(Error::Config(format!("dataset has {} samples, batch is {}", data.len(), cfg.batch)));
    }
    fs::create_dir_all(&run.dir)?;
    let mut metrics = BufWriter::new(OpenOptions::new().create(true).append(true).open(run.metrics())?);
    let mut neighbors = if run.dump_neighbors {
        Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(run.dir.join(NEIGHBORS_FILE))?))
    } else {
        None
    };
    let clock = Instant::now();
    let mut reports = Vec::new();
    let mut step = ckpt.step;
    while step < until {
        let next = step + 1;
        let idx = batch_indices(ckpt.seed, next, data.len(), cfg.batch);
        let pairs: Vec<Pair<'_>> = idx
            .iter()
            .map(|&i| Pair {
                image: &data.samples[i].image,
                audio: &data.samples[i].audio,
            })
            .collect();
        let maskings = (0..cfg.batch).map(|slot| Masking::for_step(ckpt.seed, next, slot)).collect();
        let outcome = model
            .batch_gradients(&pairs, Some(maskings))
            .and_then(|g| {
                if g.grads.iter().flatten().flatten().all(|v| v.is_finite()) {
                    Ok(g)
                } else {
                    Err(Error::Numeric(format!("non-finite gradient at step {next}")))
                }
            });
        let grads = match outcome {
            Ok(g) => g,
            Err(e) => {
                metrics.flush()?;
                Checkpoint::capture(&model, &opt, step).save(&run.checkpoint())?;
                log::error!("aborting at step {next}: {e}; last good state saved at step {step}");
                return Err(e);
            }
        };
        opt.step(&mut model.store, &grads.grads)?;
        step = next;

        let record = MetricsRecord {
            step,
            loss: grads.report,
            lr: opt.lr,
            excluded_pairs: grads.neighbors.excluded_pairs(),
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        serde_json::to_writer(&mut metrics, &record).map_err(std::io::Error::from)?;
        metrics.write_all(b"\n")?;
        if let Some(out) = neighbors.as_mut() {
            let ids: Vec<usize> = idx.iter().map(|&i| data.samples[i].id).collect();
            grads.neighbors.write_jsonl(step, &ids, out)?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: total {:.4} cotr {:.4}", grads.report.total, grads.report.cotr);
        }
        reports.push(grads.report);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            Checkpoint::capture(&model, &opt, step).save(&run.checkpoint())?;
        }
    }
    metrics.flush()?;
    if let Some(out) = neighbors.as_mut() {
        out.flush()?;
    }
    let checkpoint = Checkpoint::capture(&model, &opt, step);
    checkpoint.save(&run.checkpoint())?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        reports,
    })
}

/// Metrics text with every `wall_ms` field removed, for run comparisons.
pub fn strip_timestamps(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_ms");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

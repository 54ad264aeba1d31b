//! Training loop with a JSON-lines log and the checkpoint lifecycle.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use roadseg_core::data::Sample;
use roadseg_core::optim::AdamW;
use roadseg_core::train::{assemble_batch, batch_indices, evaluate, steps_per_epoch, train_step};
use roadseg_core::{Error, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archivable, Checkpoint, CheckpointDir, TrainState};
use crate::config::TrainConfig;
use crate::error::{AppError, AppResult};

/// Model, optimizer and progress of one run.
#[derive(Clone, Debug)]
pub struct Session<M> {
    pub model: M,
    pub opt: AdamW,
    pub state: TrainState,
}

impl<M: Archivable> Session<M> {
    pub fn new(model: M, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(cfg.adamw(), model.params());
        Self {
            model,
            opt,
            state: TrainState::default(),
        }
    }

    /// Continues from `ckpt` with the hyper-parameters of `cfg`.
    pub fn resume(ckpt: &Checkpoint, cfg: &TrainConfig) -> AppResult<Self> {
        let model = M::restore(ckpt)?;
        let opt = ckpt.optimizer(cfg.adamw())?;
        if opt.step != ckpt.state.step {
            return Err(AppError::Config(format!(
                "checkpoint optimizer is at step {} but training state at step {}",
                opt.step, ckpt.state.step
            )));
        }
        Ok(Self {
            model,
            opt,
            state: ckpt.state.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.opt), &self.state)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    /// JSON has no NaN or infinity; a non-finite loss is written as `null`.
    #[serde(deserialize_with = "null_as_nan")]
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged: Option<bool>,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Where a run writes. `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub checkpoints: Option<CheckpointDir>,
    pub log: Option<PathBuf>,
}

impl Outputs {
    pub fn in_dir(checkpoint_dir: PathBuf, log: PathBuf) -> Self {
        Self {
            checkpoints: Some(CheckpointDir(checkpoint_dir)),
            log: Some(log),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    /// Loss of every step run by this call, in order.
    pub losses: Vec<f64>,
    pub last_eval: Option<MetricsReport>,
    pub final_step: u64,
    pub total_steps: u64,
}

struct Log(Option<fs::File>);

impl Log {
    fn open(path: Option<&Path>) -> AppResult<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| AppError::io(path, e))?;
        Ok(Self(Some(f)))
    }

    fn write(&mut self, rec: &LogRecord, path: Option<&Path>) -> AppResult<()> {
        if let (Some(f), Some(p)) = (self.0.as_mut(), path) {
            let line = serde_json::to_string(rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| AppError::io(p, e))?;
        }
        Ok(())
    }
}

/// Runs AdamW steps until `epochs · ceil(n / batch)` steps are done or `stop_at` is reached.
///
/// Validation runs every `eval_interval` steps and at the final step, on `val` or on the
/// training set when no validation set is given. `latest` is saved at every evaluation, archive
/// and at the end; `best` whenever validation IoU improves. A non-finite loss aborts with a
/// logged record and leaves the last saved checkpoints untouched.
pub fn train<M: Archivable>(
    session: &mut Session<M>,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    out: &Outputs,
    stop_at: Option<u64>,
) -> AppResult<Summary> {
    if train.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let end = stop_at.map_or(total, |s| s.min(total));
    let mut log = Log::open(out.log.as_deref())?;
    let eval_set = val.unwrap_or(train);
    let mut summary = Summary {
        total_steps: total,
        final_step: session.state.step,
        ..Summary::default()
    };

    while session.state.step < end {
        let step = session.state.step;
        let indices = batch_indices(cfg.seed, step, train.len(), cfg.batch_size);
        let (images, masks) = assemble_batch(train, &indices, cfg.augment, cfg.seed, step)?;
        let loss = match train_step(&mut session.model, &mut session.opt, &images, &masks, cfg.dice_eps) {
            Ok(l) => l,
            Err(Error::Divergence { step, loss }) => {
                let rec = LogRecord {
                    step,
                    epoch: (step - 1) / per_epoch,
                    loss,
                    lr: cfg.lr,
                    eval: None,
                    diverged: Some(true),
                };
                log.write(&rec, out.log.as_deref())?;
                return Err(Error::Divergence { step, loss }.into());
            }
            Err(e) => return Err(e.into()),
        };
        session.state.step += 1;
        let done = session.state.step;
        summary.losses.push(loss);

        let evaluate_now = done == total || (cfg.eval_interval > 0 && done.is_multiple_of(cfg.eval_interval));
        let mut rec = LogRecord {
            step: done,
            epoch: step / per_epoch,
            loss,
            lr: cfg.lr,
            eval: None,
            diverged: None,
        };
        let mut improved = false;
        if evaluate_now {
            let report = evaluate(&session.model, eval_set, cfg.threshold)?;
            if session.state.best_iou.is_none_or(|b| report.iou > b) {
                session.state.best_iou = Some(report.iou);
                session.state.best_step = Some(done);
                improved = true;
            }
            rec.eval = Some(report);
            summary.last_eval = Some(report);
        }
        log.write(&rec, out.log.as_deref())?;

        if let Some(dir) = &out.checkpoints {
            let archive = cfg.archive_interval > 0 && done.is_multiple_of(cfg.archive_interval);
            if evaluate_now || archive || done == end {
                let ckpt = session.checkpoint();
                ckpt.save(&dir.latest())?;
                if improved {
                    ckpt.save(&dir.best())?;
                }
                if archive {
                    ckpt.save(&dir.archive(done))?;
                }
            }
        }
    }
    summary.final_step = session.state.step;
    Ok(summary)
}

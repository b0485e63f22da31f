//! Teacher-forced training with k-best checkpoint retention and averaging.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s4dec_core::autodiff::Tape;
use s4dec_core::model::{Seq2Seq, TrainMode};
use s4dec_core::optim::AdamW;
use s4dec_core::params::ParamStore;

use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::{RunConfig, TaskKind};
use crate::data::TaskData;
use crate::eval::teacher_forced_score;
use crate::{create_dir, write_file, HarnessError, Result};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch's batches; absent at epoch 0.
    pub train_loss: Option<f64>,
    /// Teacher-forced validation loss: cross entropy per token, or L1 per
    /// frame value for the continuous task.
    pub valid_loss: f64,
    pub valid_accuracy: Option<f64>,
}

impl EpochRecord {
    /// Checkpoint metric: validation accuracy for token tasks, validation
    /// L1 for the continuous task.
    pub fn metric(&self) -> f64 {
        self.valid_accuracy.unwrap_or(self.valid_loss)
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub log: Vec<EpochRecord>,
    /// Best checkpoints, best first.
    pub kept: Vec<Checkpoint>,
    /// Mean of `kept`.
    pub averaged: Checkpoint,
    pub model: Seq2Seq,
    /// Parameters of `averaged`.
    pub store: ParamStore<f32>,
}

fn better(kind: TaskKind, a: f64, b: f64) -> bool {
    match kind {
        TaskKind::Continuous => a < b,
        _ => a > b,
    }
}

/// Writes `cfg`, `log.jsonl`, the kept `epoch_NNN.ckpt` files and
/// `averaged.ckpt` under `out` when given.
struct RunDir(Option<PathBuf>);

impl RunDir {
    fn checkpoint_path(&self, epoch: usize) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(format!("epoch_{epoch:03}.ckpt")))
    }
}

/// Trains one model. The numeric path is single-threaded and every random
/// draw comes from `seed`, so a rerun reproduces the log bit for bit.
/// Epoch 0 (the initialization) is scored and only kept when no training
/// epochs run.
pub fn train(cfg: &RunConfig, seed: u64, data: &TaskData, out: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    let dir = RunDir(out.map(Path::to_path_buf));
    if let Some(d) = &dir.0 {
        create_dir(d)?;
        write_file(&d.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let kind = cfg.task.kind;
    let mut store = ParamStore::<f32>::new();
    let model = Seq2Seq::new(&mut store, cfg.model_config(), seed)?;
    let mut opt = AdamW::new(&store, cfg.optim.adamw(), cfg.optim.schedule());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_5eed);
    let examples = data.train.examples();
    if examples.is_empty() {
        return Err(HarnessError::Data("empty training set".into()));
    }

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut kept: Vec<(f64, usize, Checkpoint)> = Vec::new();
    let mut lines = String::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..=cfg.epochs {
        let mut train_loss = None;
        if epoch > 0 {
            order.shuffle(&mut rng);
            let (mut sum, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<_> = chunk.iter().map(|&i| examples[i]).collect();
                let mut tape = Tape::new();
                let mut mode = TrainMode { rng: &mut rng };
                let loss = model.batch_loss(&mut tape, &store, &batch, Some(&mut mode))?;
                let value = f64::from(tape.get(&loss).item());
                if !value.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        step: opt.steps_taken() + 1,
                        loss: value,
                    });
                }
                let grads = tape.backward(&loss)?.for_params(&store);
                opt.step(&mut store, &grads)?;
                sum += value;
                batches += 1;
            }
            train_loss = Some(sum / batches as f64);
        }
        let score = teacher_forced_score(&model, &store, &data.valid)?;
        let rec = EpochRecord {
            epoch,
            step: opt.steps_taken(),
            lr: opt.next_lr(),
            train_loss,
            valid_loss: score.loss,
            valid_accuracy: score.accuracy,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
        let metric = rec.metric();
        log.push(rec);
        if epoch == 0 && cfg.epochs > 0 {
            continue;
        }
        // Stable: an earlier epoch wins ties.
        let pos = kept
            .iter()
            .position(|(m, _, _)| better(kind, metric, *m))
            .unwrap_or(kept.len());
        if pos < cfg.keep_best {
            let ckpt = Checkpoint::from_store(cfg, opt.steps_taken(), Some(metric), &store);
            if let Some(p) = dir.checkpoint_path(epoch) {
                ckpt.save(&p)?;
            }
            kept.insert(pos, (metric, epoch, ckpt));
            if kept.len() > cfg.keep_best {
                let (_, evicted, _) = kept.pop().expect("over capacity");
                if let Some(p) = dir.checkpoint_path(evicted) {
                    std::fs::remove_file(&p).map_err(|e| HarnessError::io(&p, e))?;
                }
            }
        }
    }

    let kept: Vec<Checkpoint> = kept.into_iter().map(|(_, _, c)| c).collect();
    let averaged = average_checkpoints(&kept)?;
    averaged.load_into(&mut store)?;
    if let Some(d) = &dir.0 {
        write_file(&d.join("log.jsonl"), &lines)?;
        averaged.save(&d.join("averaged.ckpt"))?;
    }
    Ok(TrainResult {
        log,
        kept,
        averaged,
        model,
        store,
    })
}

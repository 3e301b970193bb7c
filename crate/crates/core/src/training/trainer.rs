use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, mse_loss, AdamState};
use crate::data::{batch_order, epoch_seed, prefetch, Batch, PairDataset};
use crate::error::{Error, Result};
use crate::network::{checkpoint, LayerGraph, NetworkConfig};
use crate::neuron::SpikeFn;

/// Wall-clock time is logged rather than written, so equal runs give equal files.
pub const METRICS_HEADER: &str = "epoch,train_mse,val_mse";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// First epoch (1-based) at which validation runs and checkpoints are considered.
    pub validation_start_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds weight initialisation and the per-epoch shuffles.
    pub seed: u64,
    /// Batches assembled ahead of the trainer.
    pub prefetch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 200,
            validation_start_epoch: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            prefetch: 2,
        }
    }
}

impl TrainSchedule {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train.epochs must be >= 1".to_string());
        }
        if self.validation_start_epoch > self.epochs {
            out.push(format!(
                "train.validation_start_epoch ({}) must not exceed train.epochs ({})",
                self.validation_start_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_mse.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{}", self.epoch, self.train_mse, val)
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation MSE of the best epoch, or its training MSE without a validation set.
    pub best_loss: f64,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Parameters after the last epoch.
    pub graph: LayerGraph<f32>,
}

/// Mean per-element MSE of Heaviside inference over a dataset.
pub fn evaluate(graph: &LayerGraph<f32>, dataset: &dyn PairDataset, batch_size: usize) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = Batch::assemble(dataset, chunk)?;
        let out = graph.forward(&b.raw)?;
        total += mse_loss(&out.output, &b.reference)?.0 * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

fn diverged(graph: &LayerGraph<f32>, out_dir: &Path, epoch: usize, reason: String) -> Error {
    let path = out_dir.join("last_finite.ckpt");
    let last_checkpoint = checkpoint::save(graph, &path).ok().map(|_| path);
    Error::Divergence {
        epoch,
        reason,
        last_checkpoint,
    }
}

/// Trains a freshly initialised network and keeps the best checkpoint.
///
/// From `validation_start_epoch` on, each epoch is scored by its validation
/// MSE (training MSE when there is no validation set) and the lowest score is
/// written to `best.ckpt`. Every epoch appends a row to `metrics.csv`.
pub fn train(
    train_set: &dyn PairDataset,
    val_set: Option<&dyn PairDataset>,
    cfg: &NetworkConfig,
    sched: &TrainSchedule,
    out_dir: &Path,
) -> Result<TrainReport> {
    let mut problems = cfg.problems();
    problems.extend(sched.problems());
    if train_set.is_empty() {
        problems.push("training set is empty".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("best.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;

    let mut graph = LayerGraph::<f32>::build(cfg, sched.seed)?;
    let mut adam = AdamState::for_graph(&graph, sched.learning_rate);
    let mut last_finite = graph.clone();
    let mut history = Vec::with_capacity(sched.epochs);
    let mut best: Option<(usize, f64)> = None;
    let n = train_set.len();

    for epoch in 1..=sched.epochs {
        let start = Instant::now();
        let order = batch_order(n, sched.batch_size, epoch_seed(sched.seed, epoch))?;
        let pass: Result<f64> = prefetch(train_set, order, sched.prefetch, |batches| {
            let mut sum = 0.0;
            for (k, batch) in batches.enumerate() {
                let batch = batch?;
                let (loss, grads) = loss_and_gradients(&graph, &batch.raw, &batch.reference, SpikeFn::Heaviside)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        reason: format!("non-finite loss or gradient in batch {k} (loss {loss})"),
                        last_checkpoint: None,
                    });
                }
                adam.step_graph(&mut graph, &grads)?;
                sum += loss * batch.len() as f64;
            }
            Ok(sum / n as f64)
        });
        let train_mse = match pass {
            Ok(v) => v,
            Err(Error::Divergence { reason, .. }) => return Err(diverged(&last_finite, out_dir, epoch, reason)),
            Err(e) => return Err(e),
        };

        let scoring = epoch >= sched.validation_start_epoch;
        let val_mse = match val_set {
            Some(v) if scoring => Some(evaluate(&graph, v, sched.batch_size)?),
            _ => None,
        };
        let score = val_mse.unwrap_or(train_mse);
        if !train_mse.is_finite() || !score.is_finite() {
            return Err(diverged(&last_finite, out_dir, epoch, format!("non-finite epoch loss {score}")));
        }

        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(metrics, "{}", record.csv_row())?;
        metrics.flush()?;
        log::info!(
            "epoch {epoch}/{}: train {train_mse:.6}{} ({:.1}s)",
            sched.epochs,
            val_mse.map(|v| format!(", val {v:.6}")).unwrap_or_default(),
            record.seconds
        );
        history.push(record);

        if scoring && best.is_none_or(|(_, b)| score < b) {
            checkpoint::save(&graph, &best_path)?;
            best = Some((epoch, score));
        }
        if graph.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite())) {
            last_finite.clone_from(&graph);
        }
    }

    let (best_epoch, best_loss) = best.ok_or_else(|| Error::Internal("no epoch was scored".into()))?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_loss,
        best_checkpoint: best_path,
        metrics: metrics_path,
        graph,
    })
}

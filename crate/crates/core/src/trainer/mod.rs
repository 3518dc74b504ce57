//! SGD training, evaluation, checkpoints, block probes and feature export.

pub mod checkpoint;
pub mod features;
pub mod sgd;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::pipeline::{Batch, BatchPlan, Dataset, Normalization};
use crate::tape::Mode;
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::Checkpoint;
pub use features::{export_features, probe_blocks, read_features, FeatureEntry, ProbeResult};
pub use sgd::{lr_at, sgd_step, LrSchedule, TrainConfig};

/// Index of the largest logit per row (first on ties).
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }

    pub fn error(&self) -> f64 {
        1.0 - self.accuracy()
    }
}

/// Mean loss and accuracy over `data`, BN in eval mode, no augmentation.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    norm: Normalization,
    batch_size: usize,
) -> Result<EvalStats> {
    let plan = BatchPlan::eval(batch_size, norm);
    let mut stats = EvalStats::default();
    let mut loss_sum = 0.0;
    for batch in plan.batches::<T>(data, 0) {
        let logits = net.logits(&batch.images, Mode::Eval)?;
        let (loss, _) = crate::tape::softmax_xent(&logits, &batch.labels)?;
        loss_sum += loss.as_f64() * batch.labels.len() as f64;
        stats.correct += count_correct(&logits, &batch.labels);
        stats.total += batch.labels.len();
    }
    stats.loss = loss_sum / stats.total.max(1) as f64;
    Ok(stats)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` on epochs without an evaluation.
    pub test_err: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_err";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.test_err.map_or_else(String::new, |e| e.to_string())
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("metrics row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            train_loss: f[2].parse().map_err(|_| bad())?,
            train_acc: f[3].parse().map_err(|_| bad())?,
            test_err: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| bad())?)
            },
        })
    }
}

/// Append-only, epoch-monotone CSV log, optionally mirrored to a file.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub path: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    /// Open (or create) a log file, keeping any rows already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            if lines.next().map(str::trim) != Some(METRICS_HEADER) {
                return Err(Error::Format(format!(
                    "{}: not a metrics log",
                    path.display()
                )));
            }
            for l in lines {
                rows.push(MetricsRow::from_csv(l)?);
            }
        } else {
            fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog {
            path: Some(path.to_path_buf()),
            rows,
        })
    }

    pub fn append(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::State(format!(
                    "metrics log is at epoch {}, refusing to append epoch {}",
                    last.epoch, row.epoch
                )));
            }
        }
        if let Some(p) = &self.path {
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(p, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Network plus optimizer position. `epoch`/`batch` name the next batch.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub net: Network<T>,
    pub cfg: TrainConfig,
    pub norm: Normalization,
    pub epoch: usize,
    pub batch: usize,
    pub global_step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net,
            cfg,
            norm,
            epoch: 0,
            batch: 0,
            global_step: 0,
        })
    }

    pub fn plan(&self) -> BatchPlan {
        BatchPlan {
            seed: self.cfg.seed,
            batch_size: self.cfg.batch_size,
            shuffle: true,
            pad_crop: self.cfg.augment,
            flip: self.cfg.augment,
            norm: self.norm,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.epoch, &self.cfg.schedule)
    }

    /// Forward, backward and one SGD update on `batch`.
    pub fn train_batch(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        let lr = self.lr();
        let (loss, correct) = self.net.run(Mode::Train, |model, tape| {
            let x = tape.input(batch.images.clone())?;
            let out = model.forward(tape, x)?;
            let correct = count_correct(tape.value(out.logits), &batch.labels);
            let loss = tape.softmax_xent(out.logits, &batch.labels)?;
            let value = tape.value(loss).data()[0].as_f64();
            tape.backward(loss)?;
            Ok((value, correct))
        })?;
        sgd_step(
            &mut self.net.store,
            lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
        )?;
        self.global_step += 1;
        Ok(StepStats {
            loss,
            correct,
            count: batch.labels.len(),
        })
    }

    /// Run the next batch of the stream, rolling over into the next epoch.
    pub fn step(&mut self, data: &Dataset) -> Result<StepStats> {
        let plan = self.plan();
        let batch = plan.batch::<T>(data, self.epoch, self.batch)?;
        let s = self.train_batch(&batch)?;
        self.advance(plan.num_batches(data.len()));
        Ok(s)
    }

    fn advance(&mut self, per_epoch: usize) {
        self.batch += 1;
        if self.batch >= per_epoch {
            self.batch = 0;
            self.epoch += 1;
        }
    }

    /// Finish the current epoch; returns mean loss and accuracy over the
    /// batches run in this call.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let plan = self.plan();
        let per_epoch = plan.num_batches(data.len());
        let mut total = StepStats::default();
        let mut loss_sum = 0.0;
        for batch in plan.batches::<T>(data, self.epoch).skip_to(self.batch) {
            let s = self.train_batch(&batch)?;
            loss_sum += s.loss * s.count as f64;
            total.correct += s.correct;
            total.count += s.count;
            self.advance(per_epoch);
        }
        total.loss = loss_sum / total.count.max(1) as f64;
        Ok(total)
    }

    /// Train to `cfg.epochs`, logging each epoch and checkpointing at the
    /// evaluation cadence. A failing epoch leaves the last checkpoint intact.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        log: &mut MetricsLog,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let lr = self.lr();
            let s = self.run_epoch(train)?;
            let due = self.cfg.eval_every > 0
                && ((epoch + 1) % self.cfg.eval_every == 0 || epoch + 1 == self.cfg.epochs);
            let test_err = match (due, test) {
                (true, Some(t)) => Some(
                    evaluate(&mut self.net, t, self.norm, self.cfg.batch_size.max(100))?.error(),
                ),
                _ => None,
            };
            log.append(MetricsRow {
                epoch,
                lr,
                train_loss: s.loss,
                train_acc: s.correct as f64 / s.count.max(1) as f64,
                test_err,
            })?;
            if due {
                if let Some(p) = checkpoint {
                    Checkpoint::capture(self).save(p)?;
                }
            }
        }
        Ok(())
    }
}

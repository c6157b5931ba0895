//! Initialisation, optimizer, schedule, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod init;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImageSet;
use crate::error::Result;
use crate::graph::Var;
use crate::layers::{Mode, Module, Session};
use crate::netbuilder::Network;
use crate::tensor::{Scalar, Tensor};

pub use optim::{sgd_nesterov_step, SgdNesterov};
pub use schedule::{lr_at, TrainConfig};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_err,test_err,seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.mrn";

/// Seed offset of the augmentation stream relative to the shuffling stream.
const AUGMENT_STREAM: u64 = 0xa5a5_0001;

/// A model that maps an image batch to class logits.
pub trait Classifier<T: Scalar>: Module<T> {
    fn logits(&self, s: &mut Session<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar> Classifier<T> for Network<T> {
    fn logits(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch's training batches.
    pub train_loss: f64,
    /// Percentage of misclassified training samples during the epoch.
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let test = r.test_err.map_or(String::new(), |e| e.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.lr, r.train_loss, r.train_err, test, r.seconds
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn count_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count()
}

/// Mean loss and misclassification count of one batch, without updating anything.
pub fn batch_loss<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<(f64, usize)> {
    let mut s = Session::frozen(mode);
    let xv = s.input(x.clone());
    let logits = model.logits(&mut s, xv)?;
    let loss = s.graph.softmax_cross_entropy(logits, labels)?;
    Ok((
        s.value(loss).item().to_f64_lossy(),
        count_errors(s.value(logits), labels),
    ))
}

/// Forward, backward, optimizer update and running-statistics update on one batch.
/// Returns the batch loss and misclassification count before the update.
pub fn train_step<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    opt: &mut SgdNesterov<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let mut s = Session::new(Mode::Train);
    let xv = s.input(x.clone());
    let logits = model.logits(&mut s, xv)?;
    let loss = s.graph.softmax_cross_entropy(logits, labels)?;
    let loss_value = s.value(loss).item().to_f64_lossy();
    let errors = count_errors(s.value(logits), labels);
    s.backward(loss)?;
    let grads: Vec<Option<Tensor<T>>> = model
        .params()
        .iter()
        .map(|p| s.param_grad(p).cloned())
        .collect();
    let stats = s.take_stats();
    drop(s);
    opt.step(model.params_mut(), &grads, lr)?;
    model.apply_stats(&stats);
    Ok((loss_value, errors))
}

/// Eval-mode mean loss and error percentage over a whole set.
pub fn evaluate<T: Scalar, M: Classifier<T>>(
    model: &M,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut errors = 0;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = set.batch::<ChaCha8Rng>(chunk, None)?;
        let (loss, err) = batch_loss(model, &x.cast::<T>(), &y, Mode::Eval)?;
        loss_sum += loss * chunk.len() as f64;
        errors += err;
    }
    let n = set.len().max(1) as f64;
    Ok((loss_sum / n, 100.0 * errors as f64 / n))
}

/// Trains `model` for `config.epochs` epochs.
///
/// The sample order is one seeded permutation, fixed for the run; augmentation (when enabled)
/// draws from a separate seeded stream. With `out_dir` set, `metrics.csv` is rewritten after
/// every epoch and `model.mrn` is written at the end.
pub fn train_loop<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunMetrics> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut order_rng);

    let mut opt = SgdNesterov::new(config.momentum, config.weight_decay);
    let mut metrics = RunMetrics::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut errors = 0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = if config.augment {
                train.batch(chunk, Some(&mut aug_rng))?
            } else {
                train.batch::<ChaCha8Rng>(chunk, None)?
            };
            let (loss, err) = train_step(model, &mut opt, &x.cast::<T>(), &y, lr)?;
            loss_sum += loss * chunk.len() as f64;
            errors += err;
        }
        let n = train.len().max(1) as f64;
        let test_err = match test {
            Some(t) => Some(evaluate(model, t, config.batch_size)?.1),
            None => None,
        };
        metrics.rows.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_err: 100.0 * errors as f64 / n,
            test_err,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            fs::write(dir.join(METRICS_FILE), metrics.to_csv())?;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(metrics)
}

/// Drops the wall-clock column, leaving the part of the metrics that is reproducible.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

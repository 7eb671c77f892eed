//! Epoch loop, evaluation, and metrics.
//!
//! All per-epoch randomness (shuffle order, gate draws, augmentation) is
//! derived from (seed, purpose, epoch), never carried across epochs, so a
//! run resumed from an epoch-boundary checkpoint continues bitwise
//! identically to an uninterrupted one.

use crate::blocks::{pinned_gates, Mode};
use crate::data::{augment_image, normalize_image, LabeledImageSet, PreprocessSpec};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::{lr_at_epoch, OptimizerState, SyncStrategy, TrainConfig};
use crate::parallel::{
    count_correct, independent_step, replica_rng_streams, synchronized_step, ReplicaGroup,
};
use crate::rng::{epoch_seed, SALT_AUGMENT, SALT_GATES, SALT_SHUFFLE};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::time::Instant;

/// One row of the metrics table.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
    pub models: usize,
}

/// Formats with six significant digits, plain notation.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let order = x.abs().log10().floor() as i32;
    let decimals = (5 - order).clamp(0, 15) as usize;
    format!("{x:.decimals$}")
}

pub fn metrics_csv_header(with_models: bool) -> String {
    if with_models {
        "epoch,lr,train_loss,train_err,test_err,seconds,models".to_string()
    } else {
        "epoch,lr,train_loss,train_err,test_err,seconds".to_string()
    }
}

impl EpochMetrics {
    pub fn csv_row(&self, with_models: bool) -> String {
        let test = self.test_err.map(fmt_sig6).unwrap_or_default();
        let base = format!(
            "{},{},{},{},{},{}",
            self.epoch,
            fmt_sig6(self.lr),
            fmt_sig6(self.train_loss),
            fmt_sig6(self.train_err),
            test,
            fmt_sig6(self.seconds)
        );
        if with_models {
            format!("{base},{}", self.models)
        } else {
            base
        }
    }
}

/// Appends metric rows to a CSV file, writing the header on creation.
pub struct MetricsWriter {
    file: std::fs::File,
    with_models: bool,
}

impl MetricsWriter {
    pub fn create(path: &std::path::Path, with_models: bool) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", metrics_csv_header(with_models))?;
        Ok(Self { file, with_models })
    }

    /// Reopens an existing file for appending (resume).
    pub fn append(path: &std::path::Path, with_models: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { file, with_models })
    }

    pub fn write(&mut self, row: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", row.csv_row(self.with_models))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Training data plus the preprocessing derived from it.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// Raw training split, values in [0, 1].
    pub raw: LabeledImageSet,
    pub preprocess: PreprocessSpec,
}

impl TrainData {
    pub fn new(raw: LabeledImageSet) -> Result<Self> {
        let preprocess = crate::data::compute_preprocess_spec(&raw)?;
        Ok(Self { raw, preprocess })
    }
}

/// Optimizer state for either synchronization strategy: one shared state for
/// gradient averaging, one per replica for parameter averaging.
pub struct TrainState {
    pub states: Vec<OptimizerState>,
    pub steps_done: usize,
}

impl TrainState {
    pub fn new(group: &ReplicaGroup, cfg: &TrainConfig) -> Self {
        let count = match cfg.sync {
            SyncStrategy::GradientAverage => 1,
            SyncStrategy::ParamAverage { .. } => group.model_count(),
        };
        Self {
            states: (0..count).map(|_| OptimizerState::new(group.primary())).collect(),
            steps_done: 0,
        }
    }
}

/// Assembles the sub-batch tensors for one step: gathers samples by index,
/// augments (training only, when enabled), then normalizes.
fn build_sub_batches(
    data: &TrainData,
    indices: &[usize],
    k: usize,
    augment: bool,
    aug_rngs: &mut [ChaCha8Rng],
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let size = data.raw.image_size();
    let sample_len = 3 * size * size;
    let per = indices.len() / k;
    let mut out = Vec::with_capacity(k);
    for r in 0..k {
        let part = &indices[r * per..(r + 1) * per];
        let mut buf = Vec::with_capacity(per * sample_len);
        let mut labels = Vec::with_capacity(per);
        for &idx in part {
            let img = data.raw.image(idx);
            let mut img = if augment {
                augment_image(img, size, &mut aug_rngs[r])
            } else {
                img.to_vec()
            };
            normalize_image(&mut img, size, &data.preprocess);
            buf.extend_from_slice(&img);
            labels.push(data.raw.labels[idx]);
        }
        out.push((
            Tensor::from_vec(Shape::new(per, 3, size, size), buf)?,
            labels,
        ));
    }
    Ok(out)
}

/// Runs one epoch: shuffle, split every mini-batch across replicas, step,
/// and synchronize. The last incomplete mini-batch is dropped. Aborts on a
/// non-finite loss.
pub fn train_epoch(
    group: &mut ReplicaGroup,
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let lr = lr_at_epoch(cfg, epoch)?;
    let k = group.model_count();
    for net in &mut group.replicas {
        net.set_mode(Mode::Training);
    }

    let mut order: Vec<usize> = (0..data.raw.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, SALT_SHUFFLE, epoch));
    order.shuffle(&mut shuffle_rng);

    let mut gate_rngs = replica_rng_streams(epoch_seed(cfg.seed, SALT_GATES, epoch), k);
    let mut aug_rngs = replica_rng_streams(epoch_seed(cfg.seed, SALT_AUGMENT, epoch), k);

    let batches = data.raw.len() / cfg.batch_size;
    if batches == 0 {
        return Err(Error::InvalidConfig(format!(
            "dataset of {} samples cannot fill one batch of {}",
            data.raw.len(),
            cfg.batch_size
        )));
    }

    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for b in 0..batches {
        let indices = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let sub = build_sub_batches(data, indices, k, cfg.augment, &mut aug_rngs)?;
        let outcome = match cfg.sync {
            SyncStrategy::GradientAverage => {
                synchronized_step(group, &sub, &mut state.states[0], lr, cfg, &mut gate_rngs)?
            }
            SyncStrategy::ParamAverage { every } => {
                let out = independent_step(group, &sub, &mut state.states, lr, cfg, &mut gate_rngs)?;
                state.steps_done += 1;
                if state.steps_done % every == 0 {
                    group.average_params();
                }
                out
            }
        };
        if !outcome.mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
        }
        loss_sum += outcome.mean_loss;
        correct += outcome.correct;
        seen += outcome.examples;
    }
    // Parameter averaging re-synchronizes at epoch end so evaluation and
    // checkpoints see one consistent model.
    if matches!(cfg.sync, SyncStrategy::ParamAverage { .. }) {
        group.average_params();
    }

    Ok(EpochMetrics {
        epoch,
        lr,
        train_loss: loss_sum / batches as f64,
        train_err: 1.0 - correct as f64 / seen as f64,
        test_err: None,
        seconds: start.elapsed().as_secs_f64(),
        models: k,
    })
}

/// Top-1 error rate in [0, 1] on pre-normalized images; deterministic for
/// fixed weights and data. Ties break toward the lowest class index.
pub fn evaluate(net: &mut Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let total = labels.len();
    if total == 0 || images.shape().n != total {
        return Err(Error::Data(format!(
            "evaluation needs a non-empty dataset with matching labels ({} images, {} labels)",
            images.shape().n,
            total
        )));
    }
    let prior_mode = net.mode;
    net.set_mode(Mode::Inference);
    let gates = pinned_gates(&net.survival, 0);
    let s = images.shape();
    let sample = s.c * s.h * s.w;
    let chunk = 256usize.min(total);
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < total {
        let n = chunk.min(total - done);
        let batch = Tensor::from_vec(
            Shape::new(n, s.c, s.h, s.w),
            images.data()[done * sample..(done + n) * sample].to_vec(),
        )?;
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &batch, &gates)?;
        let logits = tape.value(pass.logits);
        correct += count_correct(logits.data(), logits.shape(), &labels[done..done + n]);
        done += n;
    }
    net.set_mode(prior_mode);
    Ok(1.0 - correct as f64 / total as f64)
}

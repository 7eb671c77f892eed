//! Replicated training: one mini-batch split into per-replica sub-batches.
//!
//! Every step, each replica draws its own gates, runs forward/backward on
//! its sub-batch with its own batch-norm statistics, and the coordinator
//! averages gradients in fixed replica order, applies one optimizer step,
//! and broadcasts the result. Replicas are therefore bitwise identical at
//! every step boundary; their BN running statistics intentionally are not,
//! and get averaged when an evaluation network or checkpoint is produced.
//!
//! An alternative flag-gated mode lets replicas step independently and
//! averages the parameters themselves every few steps.

use crate::blocks::{draw_gates, pinned_gates, GateDraw};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::{sgd_nesterov_step, OptimizerState, TrainConfig};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// K replicas of one logical model.
#[derive(Clone, Debug)]
pub struct ReplicaGroup {
    pub replicas: Vec<Network>,
    pub sub_batch: usize,
}

impl ReplicaGroup {
    /// Clones `proto` into `model_count` replicas serving `batch_size`
    /// samples per step.
    pub fn new(proto: Network, model_count: usize, batch_size: usize) -> Result<Self> {
        if model_count == 0 {
            return Err(Error::InvalidConfig("model count must be at least 1".into()));
        }
        if batch_size == 0 || batch_size % model_count != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch size {batch_size} is not divisible by {model_count} models"
            )));
        }
        let sub_batch = batch_size / model_count;
        let mut replicas = Vec::with_capacity(model_count);
        for _ in 0..model_count - 1 {
            replicas.push(proto.clone());
        }
        replicas.push(proto);
        Ok(Self { replicas, sub_batch })
    }

    pub fn model_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn primary(&self) -> &Network {
        &self.replicas[0]
    }

    pub fn primary_mut(&mut self) -> &mut Network {
        &mut self.replicas[0]
    }

    /// True when every replica's parameters are bit-identical to the
    /// primary's.
    pub fn params_consistent(&self) -> bool {
        self.replicas[1..]
            .iter()
            .all(|r| r.params_bitwise_equal(&self.replicas[0]))
    }

    /// Copies the primary's parameters into every other replica.
    pub fn broadcast_from_primary(&mut self) {
        let (first, rest) = self.replicas.split_first_mut().expect("at least one replica");
        let mut values: Vec<&[f32]> = Vec::new();
        first.visit_params(&mut |p| values.push(p.value.data()));
        for replica in rest {
            let mut idx = 0;
            replica.visit_params_mut(&mut |p| {
                p.value.data_mut().copy_from_slice(values[idx]);
                idx += 1;
            });
        }
    }

    /// Averages parameters across replicas (fixed order, f64 accumulation)
    /// and broadcasts the result.
    pub fn average_params(&mut self) {
        let k = self.model_count() as f64;
        let mut acc: Vec<Vec<f64>> = Vec::new();
        self.replicas[0].visit_params(&mut |p| {
            acc.push(p.value.data().iter().map(|&v| v as f64).collect());
        });
        for replica in &self.replicas[1..] {
            let mut idx = 0;
            replica.visit_params(&mut |p| {
                for (a, &v) in acc[idx].iter_mut().zip(p.value.data()) {
                    *a += v as f64;
                }
                idx += 1;
            });
        }
        let mut idx = 0;
        self.replicas[0].visit_params_mut(&mut |p| {
            for (w, a) in p.value.data_mut().iter_mut().zip(&acc[idx]) {
                *w = (*a / k) as f32;
            }
            idx += 1;
        });
        self.broadcast_from_primary();
    }

    /// A single network for evaluation or checkpointing: the primary's
    /// parameters with running statistics averaged across replicas.
    pub fn evaluation_network(&self) -> Network {
        let mut net = self.replicas[0].clone();
        let k = self.model_count() as f64;
        if k > 1.0 {
            let mut means: Vec<Vec<f64>> = Vec::new();
            let mut vars: Vec<Vec<f64>> = Vec::new();
            for replica in &self.replicas {
                let mut idx = 0;
                replica.visit_running_stats(&mut |_, mean, var| {
                    if means.len() == idx {
                        means.push(vec![0.0; mean.len()]);
                        vars.push(vec![0.0; var.len()]);
                    }
                    for (a, &v) in means[idx].iter_mut().zip(mean) {
                        *a += v as f64;
                    }
                    for (a, &v) in vars[idx].iter_mut().zip(var) {
                        *a += v as f64;
                    }
                    idx += 1;
                });
            }
            let mut idx = 0;
            net.visit_running_stats_mut(&mut |mean, var| {
                for (w, a) in mean.iter_mut().zip(&means[idx]) {
                    *w = (*a / k) as f32;
                }
                for (w, a) in var.iter_mut().zip(&vars[idx]) {
                    *w = (*a / k) as f32;
                }
                idx += 1;
            });
        }
        net
    }
}

/// Contiguous, order-preserving split of a batch into K equal sub-batches.
pub fn split_batch(images: &Tensor, labels: &[usize], k: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let s = images.shape();
    if s.n != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} labels",
            s.n,
            labels.len()
        )));
    }
    if k == 0 || s.n % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} is not divisible into {k} sub-batches",
            s.n
        )));
    }
    let per = s.n / k;
    let sample = s.c * s.h * s.w;
    let mut out = Vec::with_capacity(k);
    for part in 0..k {
        let data = images.data()[part * per * sample..(part + 1) * per * sample].to_vec();
        out.push((
            Tensor::from_vec(Shape::new(per, s.c, s.h, s.w), data)?,
            labels[part * per..(part + 1) * per].to_vec(),
        ));
    }
    Ok(out)
}

/// K reproducible, statistically independent generators: one ChaCha stream
/// per replica under a shared seed.
pub fn replica_rng_streams(seed: u64, k: usize) -> Vec<ChaCha8Rng> {
    (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect()
}

/// Loss and accuracy summary of one synchronized step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Mean loss over the whole mini-batch.
    pub mean_loss: f64,
    /// Training-mode correct predictions over the whole mini-batch.
    pub correct: usize,
    pub examples: usize,
    /// The gate draws each replica used this step.
    pub gates: Vec<Vec<GateDraw>>,
}

/// Writes the arithmetic mean of all replicas' parameter gradients into the
/// primary's gradient buffers (fixed replica order, f64 accumulation).
pub fn average_gradients_into_primary(group: &mut ReplicaGroup) -> Result<()> {
    let k = group.model_count() as f64;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut missing: Option<String> = None;
    for replica in &group.replicas {
        let mut idx = 0;
        replica.visit_params(&mut |p| {
            let Some(g) = p.value.grad() else {
                if missing.is_none() {
                    missing = Some(p.name.clone());
                }
                return;
            };
            if acc.len() == idx {
                acc.push(vec![0.0; g.len()]);
            }
            for (a, &v) in acc[idx].iter_mut().zip(g) {
                *a += v as f64;
            }
            idx += 1;
        });
    }
    if let Some(name) = missing {
        return Err(Error::MissingGradient(name));
    }
    let mut idx = 0;
    group.replicas[0].visit_params_mut(&mut |p| {
        p.value.zero_grad();
        let mean: Vec<f32> = acc[idx].iter().map(|&v| (v / k) as f32).collect();
        p.value.accumulate_grad(&mean);
        idx += 1;
    });
    Ok(())
}

/// Forward/backward on one replica's sub-batch. Returns (loss, correct).
fn replica_pass(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    gates: &[GateDraw],
) -> Result<(f64, usize)> {
    net.zero_grads();
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, images, gates)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    tape.backward(loss)?;
    net.accumulate_grads(&tape, &pass)?;

    let logits = tape.value(pass.logits);
    let correct = count_correct(logits.data(), logits.shape(), labels);
    Ok((tape.value(loss).data()[0] as f64, correct))
}

/// Top-1 matches under the lowest-index tie-break.
pub fn count_correct(logits: &[f32], shape: Shape, labels: &[usize]) -> usize {
    let k = shape.c;
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// One gradient-averaged step over all replicas.
///
/// Requires replicas to enter bitwise identical; leaves them that way.
pub fn synchronized_step(
    group: &mut ReplicaGroup,
    batches: &[(Tensor, Vec<usize>)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
    gate_rngs: &mut [ChaCha8Rng],
) -> Result<StepOutcome> {
    let k = group.model_count();
    if batches.len() != k || gate_rngs.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} sub-batches and {} rng streams for {k} replicas",
            batches.len(),
            gate_rngs.len()
        )));
    }
    if !group.params_consistent() {
        return Err(Error::ReplicaDivergence);
    }

    let mut outcome = StepOutcome { mean_loss: 0.0, correct: 0, examples: 0, gates: Vec::with_capacity(k) };
    for r in 0..k {
        let net = &mut group.replicas[r];
        let gates = if cfg.pin_gates {
            pinned_gates(&net.survival, r as u64)
        } else {
            draw_gates(&net.survival, net.spec.variant, &mut gate_rngs[r], r as u64)
        };
        let (loss, correct) = replica_pass(net, &batches[r].0, &batches[r].1, &gates)?;
        outcome.mean_loss += loss;
        outcome.correct += correct;
        outcome.examples += batches[r].1.len();
        outcome.gates.push(gates);
    }
    outcome.mean_loss /= k as f64;

    average_gradients_into_primary(group)?;
    sgd_nesterov_step(&mut group.replicas[0], state, lr, cfg)?;
    group.broadcast_from_primary();
    Ok(outcome)
}

/// One independent step per replica; the caller averages parameters on its
/// own cadence. Used by the parameter-averaging synchronization mode.
pub fn independent_step(
    group: &mut ReplicaGroup,
    batches: &[(Tensor, Vec<usize>)],
    states: &mut [OptimizerState],
    lr: f64,
    cfg: &TrainConfig,
    gate_rngs: &mut [ChaCha8Rng],
) -> Result<StepOutcome> {
    let k = group.model_count();
    if batches.len() != k || gate_rngs.len() != k || states.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} sub-batches, {} optimizer states, {} rng streams for {k} replicas",
            batches.len(),
            states.len(),
            gate_rngs.len()
        )));
    }
    let mut outcome = StepOutcome { mean_loss: 0.0, correct: 0, examples: 0, gates: Vec::with_capacity(k) };
    for r in 0..k {
        let net = &mut group.replicas[r];
        let gates = if cfg.pin_gates {
            pinned_gates(&net.survival, r as u64)
        } else {
            draw_gates(&net.survival, net.spec.variant, &mut gate_rngs[r], r as u64)
        };
        let (loss, correct) = replica_pass(net, &batches[r].0, &batches[r].1, &gates)?;
        sgd_nesterov_step(net, &mut states[r], lr, cfg)?;
        outcome.mean_loss += loss;
        outcome.correct += correct;
        outcome.examples += batches[r].1.len();
        outcome.gates.push(gates);
    }
    outcome.mean_loss /= k as f64;
    Ok(outcome)
}

//! Parameterized layers and weight initialization.
//!
//! Layers own their parameters as plain tensors. Each forward call copies the
//! parameter values onto the tape as leaves and appends the leaf ids to a
//! [`ForwardTrace`] in a fixed structural order; after backward, the trace is
//! zipped against the same structural walk to pull gradients back into the
//! owning parameters.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Default batch-norm epsilon.
pub const BN_EPSILON: f32 = 1e-5;
/// Default batch-norm running-statistics update factor:
/// new = (1 - momentum) * old + momentum * batch.
pub const BN_MOMENTUM: f32 = 0.1;

/// A named, trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut value: Tensor) -> Self {
        value.set_requires_grad(true);
        Self { name: name.into(), value }
    }

    fn to_leaf(&self, tape: &mut Tape, trace: &mut ForwardTrace) -> TensorId {
        let id = tape.leaf(self.value.tape_copy(true));
        trace.param_leaves.push(id);
        id
    }
}

/// Leaf ids of every parameter registered during one forward pass, in
/// structural order.
#[derive(Default)]
pub struct ForwardTrace {
    pub param_leaves: Vec<TensorId>,
}

/// Standard deviation of the zero-mean Gaussian weight initializer:
/// sqrt(2 / fan_in).
pub fn msra_std(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("msra_init: zero fan-in".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Samples a weight tensor from N(0, 2/fan_in).
pub fn msra_init(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let std = msra_std(fan_in)?;
    let normal = Normal::new(0.0f64, std).expect("finite std");
    let data = (0..shape.len()).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_vec(shape, data)
}

/// 3x3 (or 1x1) convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = Shape::new(c_out, c_in, kernel, kernel);
        let weight = msra_init(shape, c_in * kernel * kernel, rng)?;
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, trace: &mut ForwardTrace, x: TensorId) -> Result<TensorId> {
        let w = self.weight.to_leaf(tape, trace);
        tape.conv2d(x, w, self.stride, self.padding)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(shape, 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(shape)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x`. With `use_batch_stats` the statistics come from the
    /// current batch (requires batch*h*w >= 2) and the running buffers are
    /// updated; otherwise the stored running statistics are used unchanged.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        trace: &mut ForwardTrace,
        x: TensorId,
        use_batch_stats: bool,
    ) -> Result<TensorId> {
        let s = tape.value(x).shape();
        if s.c != self.channels() {
            return Err(Error::InvalidArgument(format!(
                "batchnorm: {} channels but {} parameters",
                s.c,
                self.channels()
            )));
        }
        let (mean, var) = if use_batch_stats {
            let m = s.n * s.h * s.w;
            if m < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm: batch statistics need at least 2 elements per channel, got {m}"
                )));
            }
            let (mean, var) = batch_statistics(tape.value(x).data(), s);
            for c in 0..s.c {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] =
                    (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let gamma = self.gamma.to_leaf(tape, trace);
        let beta = self.beta.to_leaf(tape, trace);
        tape.batch_norm(x, gamma, beta, &mean, &var, self.eps, use_batch_stats)
    }
}

/// Per-channel mean and biased variance over (batch, h, w).
pub fn batch_statistics(data: &[f32], s: Shape) -> (Vec<f32>, Vec<f32>) {
    let plane = s.h * s.w;
    let m = (s.n * plane) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                mean[c] += data[base + i] as f64;
            }
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let d = data[base + i] as f64 - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (
        mean.into_iter().map(|v| v as f32).collect(),
        var.into_iter().map(|v| v as f32).collect(),
    )
}

/// Fully connected classifier: (n, c, 1, 1) -> (n, k, 1, 1) logits.
#[derive(Clone, Debug)]
pub struct Linear {
    /// Stored as a (1, 1, c_in, k) matrix so it feeds the matrix product
    /// directly.
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, c_in: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = msra_init(Shape::matrix(c_in, classes), c_in, rng)?;
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(Shape::matrix(1, classes))),
        })
    }

    pub fn forward(&self, tape: &mut Tape, trace: &mut ForwardTrace, x: TensorId) -> Result<TensorId> {
        let s = tape.value(x).shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::InvalidArgument(format!(
                "linear: expected pooled input (n, c, 1, 1), got {s}"
            )));
        }
        let classes = self.bias.value.shape().w;
        let flat = tape.reshape(x, Shape::matrix(s.n, s.c))?;
        let w = self.weight.to_leaf(tape, trace);
        let b = self.bias.to_leaf(tape, trace);
        let prod = tape.matmul(flat, w)?;
        let biased = tape.add_row_bias(prod, b)?;
        tape.reshape(biased, Shape::new(s.n, classes, 1, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn msra_std_matches_formula() {
        // conv 16 -> 16, 3x3: fan_in 144.
        let std = msra_std(16 * 9).unwrap();
        assert!((std - (2.0f64 / 144.0).sqrt()).abs() < 1e-12);
        assert!((std - 0.11785).abs() < 1e-4);
        // fan_in 2 -> sigma 1.
        assert_eq!(msra_std(2).unwrap(), 1.0);
        assert!(msra_std(0).is_err());
    }

    #[test]
    fn msra_sample_std_is_close_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let t = msra_init(Shape::new(100, 10, 10, 10), 144, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 144.0).sqrt();
        assert!(
            (var.sqrt() - target).abs() / target < 0.02,
            "sample std {} vs target {target}",
            var.sqrt()
        );
    }

    #[test]
    fn identical_seeds_give_identical_weights() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let wa = msra_init(Shape::new(4, 3, 3, 3), 27, &mut a).unwrap();
        let wb = msra_init(Shape::new(4, 3, 3, 3), 27, &mut b).unwrap();
        assert_eq!(wa.data(), wb.data());
    }

    #[test]
    fn one_by_one_unit_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("t", 1, 1, 1, 1, 0, &mut rng).unwrap();
        conv.weight.value.data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, -4.0]).unwrap(),
        );
        let y = conv.forward(&mut tape, &mut trace, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0, -4.0]);
    }

    #[test]
    fn batchnorm_training_normalizes_per_channel() {
        let mut bn = BatchNorm2d::new("t", 2);
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let data: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = tape.leaf(Tensor::from_vec(Shape::new(2, 2, 2, 4), data).unwrap());
        let y = bn.forward(&mut tape, &mut trace, x, true).unwrap();

        let out = tape.value(y).data();
        let s = tape.value(y).shape();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..s.n {
                let base = (n * s.c + c) * s.h * s.w;
                vals.extend_from_slice(&out[base..base + s.h * s.w]);
            }
            let m = vals.len() as f64;
            let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var: f64 = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_input_outputs_zero() {
        let mut bn = BatchNorm2d::new("t", 1);
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let x = tape.leaf(Tensor::filled(Shape::new(2, 1, 2, 2), 5.0));
        let y = bn.forward(&mut tape, &mut trace, x, true).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn batchnorm_rejects_single_element_statistics() {
        let mut bn = BatchNorm2d::new("t", 1);
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(bn.forward(&mut tape, &mut trace, x, true).is_err());
    }

    #[test]
    fn batchnorm_inference_is_idempotent_affine() {
        // With gamma=1, beta=0 and frozen stats, applying the map twice
        // equals composing the affine once.
        let mut bn = BatchNorm2d::new("t", 1);
        bn.running_mean[0] = 0.5;
        bn.running_var[0] = 4.0;
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let data = vec![0.0, 1.0, 2.0, 3.0];
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), data.clone()).unwrap());
        let y1 = bn.forward(&mut tape, &mut trace, x, false).unwrap();
        let y2 = bn.forward(&mut tape, &mut trace, y1, false).unwrap();

        let inv = 1.0 / (4.0f64 + BN_EPSILON as f64).sqrt();
        for (i, &v) in tape.value(y2).data().iter().enumerate() {
            let once = (data[i] as f64 - 0.5) * inv;
            let twice = (once - 0.5) * inv;
            assert!((v as f64 - twice).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut bn = BatchNorm2d::new("t", 1);
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        // Channel values {0, 2}: mean 1, biased var 1.
        let x = tape.leaf(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.0, 2.0]).unwrap());
        bn.forward(&mut tape, &mut trace, x, true).unwrap();
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-6);
        assert!((bn.running_var[0] - (0.9 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn linear_maps_pooled_features_to_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new("fc", 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let x = tape.leaf(Tensor::filled(Shape::new(2, 3, 1, 1), 1.0));
        let y = lin.forward(&mut tape, &mut trace, x).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(2, 4, 1, 1));
        // Same pooled vector per sample -> same logits per sample.
        let out = tape.value(y).data();
        assert_eq!(&out[..4], &out[4..]);
    }
}

//! Central finite-difference verification of every backward rule.
//!
//! Each component check owns a set of differentiable buffers, a forward
//! evaluation to a scalar readout, and the tape-computed gradients of that
//! readout. The oracle never touches the backward rules: it re-evaluates the
//! forward path at x +/- h (h = 1e-3) and compares the quotient against the
//! analytic gradient, elementwise, under
//! `|fd - grad| / max(|fd|, |grad|, 1)`.
//!
//! Readout weights are drawn from +/-[0.5, 1.5] so gradients sit at O(1)
//! where the f32 forward noise (~1e-4 through the quotient) stays well below
//! the 1e-3 layer tolerance.

use crate::blocks::{pinned_gates, Mode, VariantKind};
use crate::error::{Error, Result};
use crate::layers::batch_statistics;
use crate::model::{Network, NetworkSpec};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 1e-2;
const FD_STEP: f32 = 1e-3;
/// Coordinates sampled per buffer in the whole-network check.
const NETWORK_COORDS_PER_BUFFER: usize = 8;
/// Whole-network checks are restricted to desk-scale depths.
pub const MAX_CHECK_DEPTH: usize = 14;

/// Result of one component's gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Names accepted by [`check_component`], in report order.
pub fn component_names() -> &'static [&'static str] {
    &[
        "elementwise_add",
        "elementwise_mul",
        "scalar_scale",
        "matmul_2d",
        "relu",
        "conv2d",
        "batchnorm_train",
        "batchnorm_frozen",
        "avgpool2x2",
        "global_avg_pool",
        "pad_channels",
        "gate_channels",
        "linear",
        "softmax_cross_entropy",
        "network_depth8",
    ]
}

fn relative_err(fd: f64, grad: f64) -> f64 {
    (fd - grad).abs() / fd.abs().max(grad.abs()).max(1.0)
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Uniform values kept away from zero, for kinked ops.
fn uniform_off_kink(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    uniform(rng, len)
        .into_iter()
        .map(|v| {
            if v.abs() >= 0.05 {
                v
            } else if v >= 0.0 {
                v + 0.1
            } else {
                v - 0.1
            }
        })
        .collect()
}

/// Readout magnitudes shrink with the output size so the scalar loss stays
/// O(1); otherwise the f32 forward noise through the difference quotient
/// grows with the number of summed outputs.
fn readout_weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let scale = 1.0 / (len as f32).sqrt();
    (0..len)
        .map(|_| {
            let mag = rng.random_range(0.5f32..1.5) * scale;
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Central finite differences over sampled coordinates of every buffer.
fn fd_compare(
    buffers: &mut [Vec<f32>],
    mut eval: impl FnMut(&[Vec<f32>]) -> Result<f64>,
    analytic: &[Vec<f32>],
    max_coords_per_buffer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for b in 0..buffers.len() {
        let len = buffers[b].len();
        let coords: Vec<usize> = if len <= max_coords_per_buffer {
            (0..len).collect()
        } else {
            // Sample without replacement.
            let mut pool: Vec<usize> = (0..len).collect();
            (0..max_coords_per_buffer)
                .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
                .collect()
        };
        for j in coords {
            let orig = buffers[b][j];
            let plus = orig + FD_STEP;
            let minus = orig - FD_STEP;
            buffers[b][j] = plus;
            let lp = eval(buffers)?;
            buffers[b][j] = minus;
            let lm = eval(buffers)?;
            buffers[b][j] = orig;
            let h = plus as f64 - minus as f64;
            let fd = (lp - lm) / h;
            max_err = max_err.max(relative_err(fd, analytic[b][j] as f64));
            checked += 1;
        }
    }
    Ok((max_err, checked))
}

/// Builds the op output from leaf ids; shared by the eval and analytic paths
/// of one component.
type BuildFn = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>;

struct OpProblem {
    shapes: Vec<Shape>,
    buffers: Vec<Vec<f32>>,
    build: Box<BuildFn>,
    /// Fixed weights dotted against the op output to form the scalar loss.
    readout: Vec<f32>,
}

fn op_output(problem: &OpProblem, bufs: &[Vec<f32>], requires_grad: bool) -> Result<(Tape, Vec<TensorId>, TensorId)> {
    let mut tape = Tape::new();
    let leaves: Vec<TensorId> = problem
        .shapes
        .iter()
        .zip(bufs)
        .map(|(&shape, data)| {
            let mut t = Tensor::from_vec(shape, data.clone())?;
            t.set_requires_grad(requires_grad);
            Ok(tape.leaf(t))
        })
        .collect::<Result<_>>()?;
    let out = (problem.build)(&mut tape, &leaves)?;
    Ok((tape, leaves, out))
}

/// Scalar loss: f64 dot of the op output with the readout weights.
fn op_eval(problem: &OpProblem, bufs: &[Vec<f32>]) -> Result<f64> {
    let (tape, _, out) = op_output(problem, bufs, false)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(&problem.readout)
        .map(|(&y, &w)| y as f64 * w as f64)
        .sum())
}

/// Tape gradients of the same readout.
fn op_analytic(problem: &OpProblem) -> Result<Vec<Vec<f32>>> {
    let (mut tape, leaves, out) = op_output(problem, &problem.buffers, true)?;
    let shape = tape.value(out).shape();
    let w = tape.leaf(Tensor::from_vec(shape, problem.readout.clone())?);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;
    leaves
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::MissingGradient("op input".into()))
        })
        .collect()
}

fn op_problem(name: &str, rng: &mut ChaCha8Rng) -> Result<OpProblem> {
    let problem = match name {
        "elementwise_add" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape, shape],
                buffers: vec![uniform(rng, shape.len()), uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.add(ids[0], ids[1])),
                readout: readout_weights(rng, shape.len()),
            }
        }
        "elementwise_mul" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape, shape],
                buffers: vec![uniform(rng, shape.len()), uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.mul(ids[0], ids[1])),
                readout: readout_weights(rng, shape.len()),
            }
        }
        "scalar_scale" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.scale(ids[0], 0.73)),
                readout: readout_weights(rng, shape.len()),
            }
        }
        "matmul_2d" => {
            // Random 3x4 * 4x2.
            let (a, b) = (Shape::matrix(3, 4), Shape::matrix(4, 2));
            OpProblem {
                shapes: vec![a, b],
                buffers: vec![uniform(rng, a.len()), uniform(rng, b.len())],
                build: Box::new(|tape, ids| tape.matmul(ids[0], ids[1])),
                readout: readout_weights(rng, 6),
            }
        }
        "relu" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform_off_kink(rng, shape.len())],
                build: Box::new(|tape, ids| tape.relu(ids[0])),
                readout: readout_weights(rng, shape.len()),
            }
        }
        "conv2d" => {
            // Random 2x3x5x5 input, 4 output channels, stride 1, padding 1.
            let x = Shape::new(2, 3, 5, 5);
            let w = Shape::new(4, 3, 3, 3);
            let out_len = 2 * 4 * 5 * 5;
            OpProblem {
                shapes: vec![x, w],
                buffers: vec![uniform(rng, x.len()), uniform(rng, w.len())],
                build: Box::new(|tape, ids| tape.conv2d(ids[0], ids[1], 1, 1)),
                readout: readout_weights(rng, out_len),
            }
        }
        "batchnorm_train" | "batchnorm_frozen" => {
            let x = Shape::new(4, 3, 2, 2);
            let pshape = Shape::new(1, 3, 1, 1);
            let batch = name == "batchnorm_train";
            let gamma: Vec<f32> = (0..3).map(|_| rng.random_range(0.5f32..1.5)).collect();
            let beta = uniform(rng, 3);
            OpProblem {
                shapes: vec![x, pshape, pshape],
                buffers: vec![uniform(rng, x.len()), gamma, beta],
                build: Box::new(move |tape, ids| {
                    let (mean, var) = if batch {
                        let data = tape.value(ids[0]).data();
                        batch_statistics(data, tape.value(ids[0]).shape())
                    } else {
                        // Fixed running statistics.
                        (vec![0.1, -0.2, 0.05], vec![1.3, 0.8, 1.1])
                    };
                    tape.batch_norm(ids[0], ids[1], ids[2], &mean, &var, 1e-5, batch)
                }),
                readout: readout_weights(rng, x.len()),
            }
        }
        "avgpool2x2" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.avg_pool2x2(ids[0])),
                readout: readout_weights(rng, 2 * 3 * 4),
            }
        }
        "global_avg_pool" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.global_avg_pool(ids[0])),
                readout: readout_weights(rng, 6),
            }
        }
        "pad_channels" => {
            let shape = Shape::new(2, 3, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.pad_channels(ids[0], 5)),
                readout: readout_weights(rng, 2 * 5 * 16),
            }
        }
        "gate_channels" => {
            let shape = Shape::new(2, 5, 4, 4);
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(|tape, ids| tape.gate_channels(ids[0], 3, 0.6, 1.4)),
                readout: readout_weights(rng, shape.len()),
            }
        }
        "linear" => {
            let x = Shape::new(4, 6, 1, 1);
            let w = Shape::matrix(6, 5);
            let b = Shape::matrix(1, 5);
            OpProblem {
                shapes: vec![x, w, b],
                buffers: vec![uniform(rng, x.len()), uniform(rng, w.len()), uniform(rng, b.len())],
                build: Box::new(|tape, ids| {
                    let s = tape.value(ids[0]).shape();
                    let flat = tape.reshape(ids[0], Shape::matrix(s.n, s.c))?;
                    let prod = tape.matmul(flat, ids[1])?;
                    let biased = tape.add_row_bias(prod, ids[2])?;
                    tape.reshape(biased, Shape::new(s.n, 5, 1, 1))
                }),
                readout: readout_weights(rng, 20),
            }
        }
        "softmax_cross_entropy" => {
            let shape = Shape::new(4, 7, 1, 1);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..7)).collect();
            OpProblem {
                shapes: vec![shape],
                buffers: vec![uniform(rng, shape.len())],
                build: Box::new(move |tape, ids| tape.softmax_cross_entropy(ids[0], &labels)),
                readout: vec![1.0],
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck component '{other}'"
            )))
        }
    };
    Ok(problem)
}

/// Loss of a depth-8 separated-gate network (gates pinned open, training
/// statistics) on a fixed batch, as a function of the parameters.
fn network_loss(net: &mut Network, params: &[Vec<f32>], x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut idx = 0;
    net.visit_params_mut(&mut |p| {
        p.value.data_mut().copy_from_slice(&params[idx]);
        idx += 1;
    });
    let gates = pinned_gates(&net.survival, 0);
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, x, &gates)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    Ok(tape.value(loss).data()[0] as f64)
}

fn network_problem(depth: usize, seed: u64) -> Result<(Network, Vec<Vec<f32>>, Tensor, Vec<usize>)> {
    let alpha = crate::schedule::alpha_for_depth(depth)?;
    let spec = NetworkSpec::new(VariantKind::PyramidSepDrop, depth, alpha, 0.5, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::build(spec, &mut rng)?;
    net.set_mode(Mode::Training);
    let x = Tensor::from_vec(
        Shape::new(2, 3, 32, 32),
        (0..2 * 3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )?;
    let labels = vec![3usize, 8];
    let mut params = Vec::new();
    net.visit_params(&mut |p| params.push(p.value.data().to_vec()));
    Ok((net, params, x, labels))
}

/// Finite-difference check of a whole separated-gate network of the given
/// depth, gates pinned open, against sampled parameter coordinates.
pub fn check_network(depth: usize, seed: u64, corrupt: bool) -> Result<CheckReport> {
    if depth > MAX_CHECK_DEPTH {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} too large for finite-difference checking (max {MAX_CHECK_DEPTH})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    {
        let (mut net, mut params, x, labels) = network_problem(depth, seed)?;

        // Analytic pass.
        let gates = pinned_gates(&net.survival, 0);
        net.zero_grads();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x, &gates)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        tape.backward(loss)?;
        net.accumulate_grads(&tape, &pass)?;
        let mut analytic = Vec::new();
        net.visit_params(&mut |p| analytic.push(p.value.grad().expect("accumulated").to_vec()));
        if corrupt {
            analytic[0][0] += 0.25;
        }

        let (max_err, checked) = fd_compare(
            &mut params,
            |bufs| network_loss(&mut net, bufs, &x, &labels),
            &analytic,
            NETWORK_COORDS_PER_BUFFER,
            &mut rng,
        )?;
        Ok(CheckReport {
            component: format!("network_depth{depth}"),
            max_rel_err: max_err,
            tolerance: NETWORK_TOLERANCE,
            checked,
        })
    }
}

/// Runs one component's check. `corrupt` injects a deliberate error into the
/// analytic gradients, as a negative control of this harness.
pub fn check_component(name: &str, seed: u64, corrupt: bool) -> Result<CheckReport> {
    if name == "network_depth8" {
        return check_network(8, seed, corrupt);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problem = op_problem(name, &mut rng)?;
    let mut analytic = op_analytic(&problem)?;
    if corrupt {
        analytic[0][0] += 0.25;
    }
    let mut buffers = std::mem::take(&mut problem.buffers);
    let (max_err, checked) = fd_compare(
        &mut buffers,
        |bufs| op_eval(&problem, bufs),
        &analytic,
        usize::MAX,
        &mut rng,
    )?;
    Ok(CheckReport {
        component: name.to_string(),
        max_rel_err: max_err,
        tolerance: LAYER_TOLERANCE,
        checked,
    })
}

/// Checks every layer plus a whole network of the given depth; `corrupt`
/// poisons just the named component.
pub fn run_all(depth: usize, seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports: Vec<CheckReport> = component_names()
        .iter()
        .filter(|&&name| name != "network_depth8")
        .map(|&name| check_component(name, seed, corrupt == Some(name)))
        .collect::<Result<_>>()?;
    let net_name = format!("network_depth{depth}");
    reports.push(check_network(
        depth,
        seed,
        corrupt == Some(net_name.as_str()) || corrupt == Some("network"),
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_at_1e_3() {
        for &name in component_names() {
            if name == "network_depth8" {
                continue;
            }
            let report = check_component(name, 42, false).unwrap();
            assert!(
                report.passed(),
                "{name}: max rel err {} over tolerance {}",
                report.max_rel_err,
                report.tolerance
            );
            assert!(report.checked > 0);
        }
    }

    #[test]
    fn whole_network_passes_at_1e_2() {
        let report = check_component("network_depth8", 7, false).unwrap();
        assert!(
            report.passed(),
            "network: max rel err {} (tolerance {})",
            report.max_rel_err,
            report.tolerance
        );
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let report = check_component("conv2d", 42, true).unwrap();
        assert!(!report.passed(), "corruption slipped through: {}", report.max_rel_err);
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(check_component("warp_drive", 0, false).is_err());
    }
}

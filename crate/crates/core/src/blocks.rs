//! Residual block variants and stochastic-depth gating.
//!
//! Five variants share one pre-activation branch layout
//! (BN -> conv3x3 -> BN -> ReLU -> conv3x3 -> BN, no ReLU after the join):
//!
//! - `ResNet` / `PyramidNet`: ungated, y = shortcut(x) + F(x);
//! - `ResDrop` / `PyramidDrop`: one Bernoulli gate on the whole branch;
//! - `PyramidSepDrop`: two independent Bernoulli gates, one on the first
//!   c_in output channels (the part the shortcut also carries) and one on
//!   the widened channels above them.
//!
//! Gates are drawn once per block per forward pass, so a dropped block
//! vanishes for the whole mini-batch. At inference every gate is replaced by
//! its survival probability (expectation scaling). The shortcut is
//! parameter-free: average pooling when the block downsamples, then
//! zero-padded channels up to the block's output width.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ForwardTrace};
use crate::schedule::SurvivalSchedule;
use crate::tape::{Tape, TensorId};
use rand::distr::{Bernoulli, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Forward semantics toggle: batch statistics and live gates while training,
/// running statistics and expectation-scaled gates at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantKind {
    ResNet,
    ResDrop,
    PyramidNet,
    PyramidDrop,
    PyramidSepDrop,
}

impl VariantKind {
    /// Variants whose channel count may grow inside a stage.
    pub fn is_pyramidal(self) -> bool {
        matches!(self, Self::PyramidNet | Self::PyramidDrop | Self::PyramidSepDrop)
    }

    /// Variants that gate their residual branch.
    pub fn is_gated(self) -> bool {
        matches!(self, Self::ResDrop | Self::PyramidDrop | Self::PyramidSepDrop)
    }

    /// Variants that gate the widened and base channel parts independently.
    pub fn has_separated_gates(self) -> bool {
        matches!(self, Self::PyramidSepDrop)
    }

    pub const ALL: [VariantKind; 5] = [
        Self::ResNet,
        Self::ResDrop,
        Self::PyramidNet,
        Self::PyramidDrop,
        Self::PyramidSepDrop,
    ];
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::ResNet => "resnet",
            Self::ResDrop => "resdrop",
            Self::PyramidNet => "pyramid",
            Self::PyramidDrop => "pyramid-drop",
            Self::PyramidSepDrop => "pyramid-sep-drop",
        };
        f.write_str(name)
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Self::ResNet),
            "resdrop" => Ok(Self::ResDrop),
            "pyramid" => Ok(Self::PyramidNet),
            "pyramid-drop" => Ok(Self::PyramidDrop),
            "pyramid-sep-drop" => Ok(Self::PyramidSepDrop),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant '{other}' (expected resnet, resdrop, pyramid, pyramid-drop or pyramid-sep-drop)"
            ))),
        }
    }
}

/// One block's gate outcome for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDraw {
    /// 0-based block index the draw belongs to.
    pub block: usize,
    /// Gate on the base part (first c_in output channels).
    pub base_gate: bool,
    /// Gate on the widened part (channels above c_in).
    pub extra_gate: bool,
    /// Survival probability the draw was taken from.
    pub survival_p: f64,
    /// RNG stream the draw came from (replica index).
    pub stream: u64,
}

impl GateDraw {
    /// Both gates open; used by ungated variants and pinned-gate runs.
    pub fn all_on(block: usize, survival_p: f64, stream: u64) -> Self {
        Self { block, base_gate: true, extra_gate: true, survival_p, stream }
    }
}

/// Draws one gate record per block.
///
/// Ungated variants get forced-open gates without consuming randomness;
/// single-gate variants share one Bernoulli draw across both parts;
/// the separated variant draws the two parts independently with the same
/// survival probability.
pub fn draw_gates(
    schedule: &SurvivalSchedule,
    variant: VariantKind,
    rng: &mut impl Rng,
    stream: u64,
) -> Vec<GateDraw> {
    schedule
        .probs
        .iter()
        .enumerate()
        .map(|(block, &p)| {
            if !variant.is_gated() {
                return GateDraw::all_on(block, 1.0, stream);
            }
            let bernoulli = Bernoulli::new(p).expect("survival probability in (0, 1]");
            let base = bernoulli.sample(rng);
            let extra = if variant.has_separated_gates() {
                bernoulli.sample(rng)
            } else {
                base
            };
            GateDraw { block, base_gate: base, extra_gate: extra, survival_p: p, stream }
        })
        .collect()
}

/// Gate records that keep every block fully open.
pub fn pinned_gates(schedule: &SurvivalSchedule, stream: u64) -> Vec<GateDraw> {
    schedule
        .probs
        .iter()
        .enumerate()
        .map(|(block, &p)| GateDraw::all_on(block, p, stream))
        .collect()
}

/// Parameter-free identity path: average-pools when downsampling, then
/// zero-pads channels up to `c_out`.
pub fn shortcut(tape: &mut Tape, x: TensorId, c_out: usize, stride: usize) -> Result<TensorId> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument(format!(
            "shortcut: stride must be 1 or 2, got {stride}"
        )));
    }
    let c_in = tape.value(x).shape().c;
    if c_out < c_in {
        return Err(Error::InvalidArgument(format!(
            "shortcut: cannot narrow {c_in} channels to {c_out}"
        )));
    }
    let mut h = x;
    if stride == 2 {
        h = tape.avg_pool2x2(h)?;
    }
    if c_out > c_in {
        h = tape.pad_channels(h, c_out)?;
    }
    Ok(h)
}

/// Pre-activation basic block with variant-specific gating.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub index: usize,
    pub variant: VariantKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub survival_p: f64,
    /// ReLU between the two convolutions; tests of the gate-expectation
    /// identity disable it to make the branch linear.
    pub activation: bool,
    pub bn_in: BatchNorm2d,
    pub conv1: Conv2d,
    pub bn_mid: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn_out: BatchNorm2d,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        index: usize,
        variant: VariantKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        survival_p: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !variant.is_pyramidal() && c_out != c_in {
            return Err(Error::InvalidSpec(format!(
                "{variant} block cannot widen {c_in} -> {c_out} channels"
            )));
        }
        if c_out < c_in {
            return Err(Error::InvalidSpec(format!(
                "block cannot narrow {c_in} -> {c_out} channels"
            )));
        }
        Ok(Self {
            index,
            variant,
            c_in,
            c_out,
            stride,
            survival_p,
            activation: true,
            bn_in: BatchNorm2d::new(&format!("{name}.bn1"), c_in),
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng)?,
            bn_mid: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng)?,
            bn_out: BatchNorm2d::new(&format!("{name}.bn3"), c_out),
        })
    }

    fn check_gate(&self, gate: &GateDraw) -> Result<()> {
        if !self.variant.has_separated_gates() && gate.base_gate != gate.extra_gate {
            return Err(Error::InvalidArgument(format!(
                "block {}: separated gates supplied to a {} block",
                self.index, self.variant
            )));
        }
        if !self.variant.is_gated() && !(gate.base_gate && gate.extra_gate) {
            return Err(Error::InvalidArgument(format!(
                "block {}: closed gate supplied to an ungated {} block",
                self.index, self.variant
            )));
        }
        Ok(())
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        trace: &mut ForwardTrace,
        x: TensorId,
        gate: &GateDraw,
        mode: Mode,
        bn_frozen: bool,
    ) -> Result<TensorId> {
        let in_shape = tape.value(x).shape();
        if in_shape.c != self.c_in {
            return Err(Error::InvalidArgument(format!(
                "block {}: expected {} input channels, got {}",
                self.index, self.c_in, in_shape.c
            )));
        }
        self.check_gate(gate)?;
        let use_batch = mode == Mode::Training && !bn_frozen;

        let mut h = self.bn_in.forward(tape, trace, x, use_batch)?;
        h = self.conv1.forward(tape, trace, h)?;
        h = self.bn_mid.forward(tape, trace, h, use_batch)?;
        if self.activation {
            h = tape.relu(h)?;
        }
        h = self.conv2.forward(tape, trace, h)?;
        h = self.bn_out.forward(tape, trace, h, use_batch)?;

        let gated = if self.variant.has_separated_gates() {
            let (lower, upper) = match mode {
                Mode::Training => (
                    if gate.base_gate { 1.0 } else { 0.0 },
                    if gate.extra_gate { 1.0 } else { 0.0 },
                ),
                Mode::Inference => (self.survival_p as f32, self.survival_p as f32),
            };
            tape.gate_channels(h, self.c_in, lower, upper)?
        } else if self.variant.is_gated() {
            let factor = match mode {
                Mode::Training => {
                    if gate.base_gate {
                        1.0
                    } else {
                        0.0
                    }
                }
                Mode::Inference => self.survival_p as f32,
            };
            tape.scale(h, factor)?
        } else {
            h
        };

        let sc = shortcut(tape, x, self.c_out, self.stride)?;
        tape.add(sc, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_survival_schedule;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_names_round_trip() {
        for v in VariantKind::ALL {
            assert_eq!(v.to_string().parse::<VariantKind>().unwrap(), v);
        }
        assert!("pyramidnet".parse::<VariantKind>().is_err());
    }

    #[test]
    fn ungated_variants_force_gates_open() {
        let schedule = build_survival_schedule(6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in [VariantKind::ResNet, VariantKind::PyramidNet] {
            let gates = draw_gates(&schedule, v, &mut rng, 0);
            assert!(gates.iter().all(|g| g.base_gate && g.extra_gate));
            assert!(gates.iter().all(|g| g.survival_p == 1.0));
        }
    }

    #[test]
    fn single_gate_variants_share_the_draw() {
        let schedule = build_survival_schedule(40, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            for gate in draw_gates(&schedule, VariantKind::PyramidDrop, &mut rng, 0) {
                assert_eq!(gate.base_gate, gate.extra_gate);
            }
        }
    }

    #[test]
    fn separated_gates_are_independent_at_half_probability() {
        // Joint frequency of each (b1, b2) outcome ~ 1/4 within 3 sigma.
        let schedule = build_survival_schedule(1, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let g = &draw_gates(&schedule, VariantKind::PyramidSepDrop, &mut rng, 0)[0];
            counts[(g.base_gate as usize) * 2 + g.extra_gate as usize] += 1;
        }
        let sigma = (0.25 * 0.75 / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - 0.25).abs() < 3.0 * sigma,
                "outcome {i} frequency {freq} outside 3 sigma of 0.25"
            );
        }
    }

    #[test]
    fn survival_frequency_tracks_schedule() {
        let schedule = build_survival_schedule(2, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 50_000usize;
        let mut kept = [0usize; 2];
        for _ in 0..trials {
            for (b, g) in draw_gates(&schedule, VariantKind::ResDrop, &mut rng, 0)
                .iter()
                .enumerate()
            {
                kept[b] += g.base_gate as usize;
            }
        }
        for (b, &k) in kept.iter().enumerate() {
            let p = schedule.probs[b];
            let freq = k as f64 / trials as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * sigma, "block {b}: {freq} vs {p}");
        }
    }

    #[test]
    fn shortcut_identity_when_shapes_match() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 4, 4, 4), 2.0));
        let y = shortcut(&mut tape, x, 4, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shortcut_pads_new_channels_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 16, 2, 2), 1.0));
        let y = shortcut(&mut tape, x, 21, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), Shape::new(1, 21, 2, 2));
        for c in 0..21 {
            let expect = if c < 16 { 1.0 } else { 0.0 };
            for i in 0..4 {
                assert_eq!(out.data()[out.at(0, c, i / 2, i % 2)], expect);
            }
        }
    }

    #[test]
    fn strided_shortcut_halves_resolution_of_constant_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 3, 8, 8), 0.7));
        let y = shortcut(&mut tape, x, 3, 2).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 3, 4, 4));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        assert!(shortcut(&mut tape, x, 2, 1).is_err());
        assert!(shortcut(&mut tape, x, 3, 3).is_err());
    }

    #[test]
    fn shortcut_backward_is_the_pooling_adjoint_with_dropped_padding() {
        // Downsampling + widening shortcut: the upstream gradient's first
        // c_in channels flow back through the pooling adjoint; padded
        // channels vanish.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 2, 4, 4), 1.0).with_requires_grad());
        let y = shortcut(&mut tape, x, 3, 2).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 3, 2, 2));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // Each input pixel feeds one pooled output with weight 1/4; the
        // padded third channel contributes nothing.
        for &g in tape.grad(x).unwrap() {
            assert_eq!(g, 0.25);
        }
    }

    fn test_block(variant: VariantKind, seed: u64) -> BasicBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BasicBlock::new("s1.b1", 0, variant, 4, 6, 1, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn both_gates_closed_leaves_only_the_shortcut() {
        let mut block = test_block(VariantKind::PyramidSepDrop, 7);
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let data: Vec<f32> = (0..64).map(|i| (i as f32 * 0.31).sin()).collect();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 4, 4, 4), data).unwrap());
        let gate = GateDraw { block: 0, base_gate: false, extra_gate: false, survival_p: 0.5, stream: 0 };
        let y = block
            .forward(&mut tape, &mut trace, x, &gate, Mode::Training, false)
            .unwrap();
        let expect = shortcut(&mut tape, x, 6, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(expect).data());
    }

    #[test]
    fn open_gates_match_ungated_pyramid_block_bitwise() {
        let mut gated = test_block(VariantKind::PyramidSepDrop, 11);
        let mut plain = test_block(VariantKind::PyramidNet, 11);

        let data: Vec<f32> = (0..128).map(|i| (i as f32 * 0.17).cos()).collect();
        let run = |block: &mut BasicBlock, gate: GateDraw| {
            let mut tape = Tape::new();
            let mut trace = ForwardTrace::default();
            let x = tape.leaf(
                Tensor::from_vec(Shape::new(2, 4, 4, 4), data.clone()).unwrap(),
            );
            let y = block
                .forward(&mut tape, &mut trace, x, &gate, Mode::Training, false)
                .unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run(&mut gated, GateDraw::all_on(0, 0.5, 0));
        let b = run(&mut plain, GateDraw::all_on(0, 1.0, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_gates_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut block =
            BasicBlock::new("s1.b1", 0, VariantKind::ResNet, 4, 4, 1, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        let x = tape.leaf(Tensor::filled(Shape::new(2, 4, 4, 4), 0.5));
        let split = GateDraw { block: 0, base_gate: true, extra_gate: false, survival_p: 0.5, stream: 0 };
        let err = block
            .forward(&mut tape, &mut trace, x, &split, Mode::Training, false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("separated gates"), "{err}");

        let closed = GateDraw { block: 0, base_gate: false, extra_gate: false, survival_p: 0.5, stream: 0 };
        let err = block
            .forward(&mut tape, &mut trace, x, &closed, Mode::Training, false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("ungated"), "{err}");
    }

    #[test]
    fn resnet_variants_may_not_widen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(BasicBlock::new("b", 0, VariantKind::ResNet, 4, 6, 1, 1.0, &mut rng).is_err());
        assert!(BasicBlock::new("b", 0, VariantKind::ResDrop, 4, 6, 1, 0.5, &mut rng).is_err());
        assert!(BasicBlock::new("b", 0, VariantKind::PyramidNet, 4, 6, 1, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn gate_expectation_matches_inference_on_linear_branch() {
        // With a linear branch (no ReLU, frozen BN), the probability-weighted
        // mean over the four gate outcomes equals expectation scaling.
        let p = 0.7f64;
        let mut block = test_block(VariantKind::PyramidSepDrop, 17);
        block.activation = false;
        block.survival_p = p;

        let data: Vec<f32> = (0..64).map(|i| ((i * 37 % 64) as f32 / 32.0) - 1.0).collect();
        let x_tensor = Tensor::from_vec(Shape::new(1, 4, 4, 4), data).unwrap();

        let mut run = |base: bool, extra: bool, mode: Mode| {
            let mut tape = Tape::new();
            let mut trace = ForwardTrace::default();
            let x = tape.leaf(x_tensor.clone());
            let gate = GateDraw { block: 0, base_gate: base, extra_gate: extra, survival_p: p, stream: 0 };
            let y = block
                .forward(&mut tape, &mut trace, x, &gate, mode, true)
                .unwrap();
            tape.value(y).data().to_vec()
        };

        let outcomes = [
            (run(false, false, Mode::Training), (1.0 - p) * (1.0 - p)),
            (run(false, true, Mode::Training), (1.0 - p) * p),
            (run(true, false, Mode::Training), p * (1.0 - p)),
            (run(true, true, Mode::Training), p * p),
        ];
        let inference = run(true, true, Mode::Inference);

        for i in 0..inference.len() {
            let mean: f64 = outcomes
                .iter()
                .map(|(out, w)| out[i] as f64 * w)
                .sum();
            assert!(
                (mean - inference[i] as f64).abs() < 1e-5,
                "element {i}: enumerated {mean} vs inference {}",
                inference[i]
            );
        }
    }
}

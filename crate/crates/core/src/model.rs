//! Network assembly and the parameter registry.
//!
//! A network is a 3x3 stem convolution to the base width, three stages of
//! basic blocks at spatial sizes 32/16/8 (the first block of stages two and
//! three downsamples), and a BN -> ReLU -> global average pool -> linear
//! head. Parameter names follow `stage.block.layer.role`
//! (e.g. `s2.b3.conv1.weight`) and are stable across runs; checkpoints and
//! replica synchronization key on them.

use crate::blocks::{BasicBlock, GateDraw, Mode, VariantKind};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ForwardTrace, Linear, Parameter};
use crate::schedule::{
    blocks_per_stage, build_channel_schedule, build_survival_schedule, ChannelSchedule,
    SurvivalSchedule,
};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Input images are CIFAR-shaped.
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 32;
/// Stem output width.
pub const DEFAULT_BASE_WIDTH: usize = 16;

/// Everything needed to build a network deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: VariantKind,
    pub depth: usize,
    pub alpha: f64,
    pub p_last: f64,
    pub num_classes: usize,
    pub base_width: usize,
}

impl NetworkSpec {
    pub fn new(variant: VariantKind, depth: usize, alpha: f64, p_last: f64, num_classes: usize) -> Self {
        Self { variant, depth, alpha, p_last, num_classes, base_width: DEFAULT_BASE_WIDTH }
    }

    pub fn validate(&self) -> Result<()> {
        crate::schedule::validate_depth(self.depth)?;
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if !self.variant.is_pyramidal() && self.alpha != 0.0 {
            return Err(Error::InvalidSpec(format!(
                "variant {} keeps a constant width; alpha must be 0, got {}",
                self.variant, self.alpha
            )));
        }
        if !(self.p_last > 0.0 && self.p_last <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "p_last must lie in (0, 1], got {}",
                self.p_last
            )));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidSpec("base width must be positive".into()));
        }
        Ok(())
    }

    pub fn block_count(&self) -> Result<usize> {
        crate::schedule::block_count_for_depth(self.depth)
    }
}

/// One forward pass' outputs: the logits node plus the parameter leaves
/// registered along the way (needed to route gradients back).
pub struct ForwardPass {
    pub logits: TensorId,
    pub trace: ForwardTrace,
}

/// A built classification network.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub mode: Mode,
    /// When set, batch normalization uses running statistics even in
    /// training mode and leaves them untouched.
    pub bn_frozen: bool,
    pub channels: ChannelSchedule,
    pub survival: SurvivalSchedule,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head_bn: BatchNorm2d,
    head_fc: Linear,
}

impl Network {
    /// Builds the network with fresh Gaussian weights drawn from `rng`.
    pub fn build(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let channels = build_channel_schedule(spec.depth, spec.alpha, spec.base_width)?;
        let survival = build_survival_schedule(channels.block_count(), spec.p_last)?;
        let per_stage = blocks_per_stage(spec.depth)?;

        let stem = Conv2d::new("stem.conv", INPUT_CHANNELS, spec.base_width, 3, 1, 1, rng)?;
        let mut blocks = Vec::with_capacity(channels.block_count());
        for stage in 0..3 {
            for b in 0..per_stage {
                let index = stage * per_stage + b;
                let name = format!("s{}.b{}", stage + 1, b + 1);
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &name,
                    index,
                    spec.variant,
                    channels.input_width(index),
                    channels.block_widths[index],
                    stride,
                    survival.probs[index],
                    rng,
                )?);
            }
        }
        let final_width = channels.final_width();
        let head_bn = BatchNorm2d::new("head.bn", final_width);
        let head_fc = Linear::new("head.fc", final_width, spec.num_classes, rng)?;

        Ok(Self {
            spec,
            mode: Mode::Training,
            bn_frozen: false,
            channels,
            survival,
            stem,
            blocks,
            head_bn,
            head_fc,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn_frozen = frozen;
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Mutable access to a block; tests use this to linearize a branch.
    pub fn block_mut(&mut self, index: usize) -> &mut BasicBlock {
        &mut self.blocks[index]
    }

    /// Runs the network on `x`, registering parameters on `tape`.
    ///
    /// `gates` must hold one draw per block; ungated variants require them
    /// open but otherwise ignore them, and at inference the drawn values are
    /// replaced by expectation scaling.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, gates: &[GateDraw]) -> Result<ForwardPass> {
        let s = x.shape();
        if s.c != INPUT_CHANNELS || s.h != INPUT_SIZE || s.w != INPUT_SIZE {
            return Err(Error::InvalidArgument(format!(
                "network input must be (batch, {INPUT_CHANNELS}, {INPUT_SIZE}, {INPUT_SIZE}), got {s}"
            )));
        }
        if gates.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} gate draws, got {}",
                self.blocks.len(),
                gates.len()
            )));
        }
        let mode = self.mode;
        let bn_frozen = self.bn_frozen;
        let use_batch = mode == Mode::Training && !bn_frozen;

        let mut trace = ForwardTrace::default();
        let mut h = tape.leaf(x.tape_copy(false));
        h = self.stem.forward(tape, &mut trace, h)?;
        for (block, gate) in self.blocks.iter_mut().zip(gates) {
            h = block.forward(tape, &mut trace, h, gate, mode, bn_frozen)?;
        }
        h = self.head_bn.forward(tape, &mut trace, h, use_batch)?;
        h = tape.relu(h)?;
        h = tape.global_avg_pool(h)?;
        let logits = self.head_fc.forward(tape, &mut trace, h)?;
        Ok(ForwardPass { logits, trace })
    }

    /// Visits every parameter in the same structural order `forward`
    /// registers them.
    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Parameter)) {
        f(&self.stem.weight);
        for b in &self.blocks {
            f(&b.bn_in.gamma);
            f(&b.bn_in.beta);
            f(&b.conv1.weight);
            f(&b.bn_mid.gamma);
            f(&b.bn_mid.beta);
            f(&b.conv2.weight);
            f(&b.bn_out.gamma);
            f(&b.bn_out.beta);
        }
        f(&self.head_bn.gamma);
        f(&self.head_bn.beta);
        f(&self.head_fc.weight);
        f(&self.head_fc.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Parameter)) {
        f(&mut self.stem.weight);
        for b in &mut self.blocks {
            f(&mut b.bn_in.gamma);
            f(&mut b.bn_in.beta);
            f(&mut b.conv1.weight);
            f(&mut b.bn_mid.gamma);
            f(&mut b.bn_mid.beta);
            f(&mut b.conv2.weight);
            f(&mut b.bn_out.gamma);
            f(&mut b.bn_out.beta);
        }
        f(&mut self.head_bn.gamma);
        f(&mut self.head_bn.beta);
        f(&mut self.head_fc.weight);
        f(&mut self.head_fc.bias);
    }

    /// Visits every BN running-statistics buffer in structural order.
    pub fn visit_running_stats<'a>(&'a self, f: &mut impl FnMut(&'a str, &'a [f32], &'a [f32])) {
        for b in &self.blocks {
            for bn in [&b.bn_in, &b.bn_mid, &b.bn_out] {
                f(bn.gamma.name.trim_end_matches(".gamma"), &bn.running_mean, &bn.running_var);
            }
        }
        f("head.bn", &self.head_bn.running_mean, &self.head_bn.running_var);
    }

    pub fn visit_running_stats_mut(&mut self, f: &mut impl FnMut(&mut Vec<f32>, &mut Vec<f32>)) {
        for b in &mut self.blocks {
            for bn in [&mut b.bn_in, &mut b.bn_mid, &mut b.bn_out] {
                f(&mut bn.running_mean, &mut bn.running_var);
            }
        }
        f(&mut self.head_bn.running_mean, &mut self.head_bn.running_var);
    }

    /// (name, shape) of every parameter, in registry order.
    pub fn registry(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.shape())));
        out
    }

    /// Number of trainable scalars in the built network.
    pub fn parameter_total(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.value.len());
        total
    }

    /// Copies gradients accumulated on the tape back into the owning
    /// parameters (adding onto whatever is already there).
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        let leaves = &pass.trace.param_leaves;
        let mut idx = 0;
        let mut result = Ok(());
        self.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let Some(&leaf) = leaves.get(idx) else {
                result = Err(Error::InvalidArgument(
                    "forward trace does not cover every parameter".into(),
                ));
                return;
            };
            match tape.grad(leaf) {
                Some(g) => p.value.accumulate_grad(g),
                None => result = Err(Error::MissingGradient(p.name.clone())),
            }
            idx += 1;
        });
        result?;
        if idx != leaves.len() {
            return Err(Error::InvalidArgument(format!(
                "forward trace has {} leaves for {idx} parameters",
                leaves.len()
            )));
        }
        Ok(())
    }

    /// Resets every parameter's gradient accumulator to zero.
    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.value.zero_grad());
    }

    /// True when both networks hold bit-identical parameter values.
    pub fn params_bitwise_equal(&self, other: &Network) -> bool {
        let mut mine = Vec::new();
        self.visit_params(&mut |p| mine.push(p.value.data()));
        let mut theirs = Vec::new();
        other.visit_params(&mut |p| theirs.push(p.value.data()));
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Closed-form parameter count for a spec, without building the network.
pub fn parameter_count(spec: &NetworkSpec) -> Result<usize> {
    spec.validate()?;
    let channels = build_channel_schedule(spec.depth, spec.alpha, spec.base_width)?;
    let mut total = spec.base_width * INPUT_CHANNELS * 9; // stem
    for (k, &c_out) in channels.block_widths.iter().enumerate() {
        let c_in = channels.input_width(k);
        total += 2 * c_in; // bn1
        total += c_out * c_in * 9; // conv1
        total += 2 * c_out; // bn2
        total += c_out * c_out * 9; // conv2
        total += 2 * c_out; // bn3
    }
    let last = channels.final_width();
    total += 2 * last; // head bn
    total += last * spec.num_classes + spec.num_classes; // classifier
    Ok(total)
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation records one node holding its output tensor, the ids of its
//! inputs, and whatever intermediates its backward rule needs. Nodes are
//! appended in execution order, so the tape is trivially topologically sorted
//! and a single reverse sweep visits each node exactly once. Gradients of
//! tensors feeding multiple consumers accumulate by summation.
//!
//! Tensors and tapes are single-owner objects: they may move between threads
//! but are never shared mutably. Kernel-level parallelism lives in
//! [`crate::kernels`] and writes disjoint output elements only.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

struct BatchNormNode {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    /// (x - mean) * inv_std, saved for both gradient rules.
    normalized: Vec<f32>,
    /// Per-channel 1/sqrt(var + eps).
    inv_std: Vec<f32>,
    /// True when the statistics came from the current batch, which couples
    /// the gradient across the batch dimension.
    batch_stats: bool,
}

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f32 },
    Sum { a: TensorId },
    Relu { a: TensorId },
    MatMul { a: TensorId, b: TensorId },
    AddRowBias { a: TensorId, bias: TensorId },
    Reshape { a: TensorId },
    Conv2d { x: TensorId, w: TensorId, geom: ConvGeom },
    BatchNorm(BatchNormNode),
    AvgPool2x2 { a: TensorId },
    GlobalAvgPool { a: TensorId },
    PadChannels { a: TensorId },
    GateChannels { a: TensorId, split: usize, lower: f32, upper: f32 },
    SoftmaxCrossEntropy { logits: TensorId, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of executed operations plus their output tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an externally produced tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a node by the last backward pass, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn out_of(&self, inputs: &[TensorId], shape: Shape, data: Vec<f32>) -> Tensor {
        let mut t = Tensor::from_vec(shape, data).expect("op produced wrong buffer length");
        let requires = inputs.iter().any(|id| self.nodes[id.0].value.requires_grad());
        t.set_requires_grad(requires);
        t
    }

    /// out[i] = a[i] + b[i].
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "elementwise_add", left: sa, right: sb });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = self.out_of(&[a, b], sa, data);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// out[i] = a[i] * b[i].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "elementwise_mul", left: sa, right: sb });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = self.out_of(&[a, b], sa, data);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// out[i] = factor * a[i].
    pub fn scale(&mut self, a: TensorId, factor: f32) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scalar_scale: non-finite factor {factor}"
            )));
        }
        let shape = self.value(a).shape();
        let data = self.value(a).data().iter().map(|x| factor * x).collect();
        let out = self.out_of(&[a], shape, data);
        Ok(self.push(out, Op::Scale { a, factor }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let out = self.out_of(&[a], Shape::scalar(), vec![total as f32]);
        Ok(self.push(out, Op::Sum { a }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.value(a).shape();
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let out = self.out_of(&[a], shape, data);
        Ok(self.push(out, Op::Relu { a }))
    }

    /// Matrix product of two (1, 1, r, c) tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !sa.is_matrix() || !sb.is_matrix() || sa.w != sb.h {
            return Err(Error::ShapeMismatch { op: "matmul_2d", left: sa, right: sb });
        }
        let (m, k, n) = (sa.h, sa.w, sb.w);
        let mut data = vec![0.0f32; m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let out = self.out_of(&[a, b], Shape::matrix(m, n), data);
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// Adds a (1, 1, 1, k) row vector to every row of a (1, 1, n, k) matrix.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if !sa.is_matrix() || !sb.is_matrix() || sb.h != 1 || sa.w != sb.w {
            return Err(Error::ShapeMismatch { op: "add_row_bias", left: sa, right: sb });
        }
        let k = sa.w;
        let bdata = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdata[i % k])
            .collect();
        let out = self.out_of(&[a, bias], sa, data);
        Ok(self.push(out, Op::AddRowBias { a, bias }))
    }

    /// Reinterprets the buffer under a new shape of identical length.
    pub fn reshape(&mut self, a: TensorId, shape: Shape) -> Result<TensorId> {
        let sa = self.value(a).shape();
        if sa.len() != shape.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: sa, right: shape });
        }
        let data = self.value(a).data().to_vec();
        let out = self.out_of(&[a], shape, data);
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Cross-correlation of x (n, c_in, h, w) with w (c_out, c_in, kh, kw).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, padding: usize) -> Result<TensorId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.c != sw.c {
            return Err(Error::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        let geom = ConvGeom::compute(sx.n, sx.c, sw.n, sx.h, sx.w, sw.h, sw.w, stride, padding)?;
        let data = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = Shape::new(geom.batch, geom.c_out, geom.oh, geom.ow);
        let out = self.out_of(&[x, w], shape, data);
        Ok(self.push(out, Op::Conv2d { x, w, geom }))
    }

    /// Per-channel affine normalization with caller-supplied statistics.
    ///
    /// `batch_stats` marks statistics computed from `x` itself, which makes
    /// the backward rule couple every element of a channel.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<TensorId> {
        let sx = self.value(x).shape();
        let expect = Shape::new(1, sx.c, 1, 1);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != expect {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm: {name} shape {s} does not match {expect}"
                )));
            }
        }
        if mean.len() != sx.c || var.len() != sx.c {
            return Err(Error::InvalidArgument(format!(
                "batchnorm: {} channels but {} statistics",
                sx.c,
                mean.len()
            )));
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let plane = sx.h * sx.w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normalized = vec![0.0f32; xd.len()];
        let mut data = vec![0.0f32; xd.len()];
        for n in 0..sx.n {
            for c in 0..sx.c {
                let base = (n * sx.c + c) * plane;
                for i in 0..plane {
                    let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                    normalized[base + i] = xhat;
                    data[base + i] = gd[c] * xhat + bd[c];
                }
            }
        }
        let out = self.out_of(&[x, gamma, beta], sx, data);
        Ok(self.push(
            out,
            Op::BatchNorm(BatchNormNode { x, gamma, beta, normalized, inv_std, batch_stats }),
        ))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2x2(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avgpool2x2: spatial extent {}x{} not divisible by 2",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let xd = self.value(a).data();
        let mut data = vec![0.0f32; s.n * s.c * oh * ow];
        let mut idx = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.h * s.w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let p = base + 2 * oi * s.w + 2 * oj;
                        data[idx] = 0.25 * (xd[p] + xd[p + 1] + xd[p + s.w] + xd[p + s.w + 1]);
                        idx += 1;
                    }
                }
            }
        }
        let out = self.out_of(&[a], Shape::new(s.n, s.c, oh, ow), data);
        Ok(self.push(out, Op::AvgPool2x2 { a }))
    }

    /// Spatial mean per (sample, channel): (n, c, h, w) -> (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).shape();
        let plane = s.h * s.w;
        if plane == 0 {
            return Err(Error::InvalidArgument("global_avg_pool: empty spatial extent".into()));
        }
        let xd = self.value(a).data();
        let mut data = vec![0.0f32; s.n * s.c];
        for (i, slot) in data.iter_mut().enumerate() {
            let base = i * plane;
            let sum: f64 = xd[base..base + plane].iter().map(|&v| v as f64).sum();
            *slot = (sum / plane as f64) as f32;
        }
        let out = self.out_of(&[a], Shape::new(s.n, s.c, 1, 1), data);
        Ok(self.push(out, Op::GlobalAvgPool { a }))
    }

    /// Appends all-zero channels up to `c_out`.
    pub fn pad_channels(&mut self, a: TensorId, c_out: usize) -> Result<TensorId> {
        let s = self.value(a).shape();
        if c_out < s.c {
            return Err(Error::InvalidArgument(format!(
                "pad_channels: target {c_out} below input channels {}",
                s.c
            )));
        }
        let plane = s.h * s.w;
        let xd = self.value(a).data();
        let mut data = vec![0.0f32; s.n * c_out * plane];
        for n in 0..s.n {
            for c in 0..s.c {
                let src = (n * s.c + c) * plane;
                let dst = (n * c_out + c) * plane;
                data[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
            }
        }
        let out = self.out_of(&[a], Shape::new(s.n, c_out, s.h, s.w), data);
        Ok(self.push(out, Op::PadChannels { a }))
    }

    /// Scales channels [0, split) by `lower` and [split, c) by `upper`.
    pub fn gate_channels(&mut self, a: TensorId, split: usize, lower: f32, upper: f32) -> Result<TensorId> {
        let s = self.value(a).shape();
        if split > s.c {
            return Err(Error::InvalidArgument(format!(
                "gate_channels: split {split} beyond {} channels",
                s.c
            )));
        }
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidArgument("gate_channels: non-finite gate".into()));
        }
        let plane = s.h * s.w;
        let xd = self.value(a).data();
        let mut data = vec![0.0f32; xd.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let f = if c < split { lower } else { upper };
                for i in 0..plane {
                    data[base + i] = f * xd[base + i];
                }
            }
        }
        let out = self.out_of(&[a], s, data);
        Ok(self.push(out, Op::GateChannels { a, split, lower, upper }))
    }

    /// Mean negative log-likelihood over the batch with a stabilized
    /// log-sum-exp; logits are (n, k, 1, 1).
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.value(logits).shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: logits shape {s} is not (batch, classes, 1, 1)"
            )));
        }
        let (n, k) = (s.n, s.c);
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (((v - max) as f64).exp() / denom) as f32;
            }
            total += denom.ln() - (row[labels[i]] - max) as f64;
        }
        let loss = (total / n as f64) as f32;
        let out = self.out_of(&[logits], Shape::scalar(), vec![loss]);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Propagates gradients from a scalar root back through the tape.
    ///
    /// Every reachable node with `requires_grad` accumulates into its
    /// tensor's gradient buffer; fan-in gradients sum. Calling on an empty
    /// tape is a no-op.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "backward: unknown node {}",
                root.0
            )));
        }
        let root_shape = self.nodes[root.0].value.shape();
        if !root_shape.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: root must be scalar-shaped, got {root_shape}"
            )));
        }

        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let contributions = self.input_grads(idx, &g);
            for (input, delta) in contributions {
                match &mut grads[input.0] {
                    Some(buf) => {
                        for (acc, d) in buf.iter_mut().zip(&delta) {
                            *acc += d;
                        }
                    }
                    None => grads[input.0] = Some(delta),
                }
            }
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn input_grads(&self, idx: usize, g: &[f32]) -> Vec<(TensorId, Vec<f32>)> {
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants_grad(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let bd = self.value(*b).data();
                    out.push((*a, g.iter().zip(bd).map(|(x, y)| x * y).collect()));
                }
                if self.wants_grad(*b) {
                    let ad = self.value(*a).data();
                    out.push((*b, g.iter().zip(ad).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale { a, factor } => {
                if self.wants_grad(*a) {
                    out.push((*a, g.iter().map(|x| factor * x).collect()));
                }
            }
            Op::Sum { a } => {
                if self.wants_grad(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).len()]));
                }
            }
            Op::Relu { a } => {
                if self.wants_grad(*a) {
                    let xd = self.value(*a).data();
                    out.push((
                        *a,
                        g.iter()
                            .zip(xd)
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa.h, sa.w, sb.w);
                if self.wants_grad(*a) {
                    // da = g * b^T
                    let mut da = vec![0.0f32; m * k];
                    kernels::mm_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if self.wants_grad(*b) {
                    // db = a^T * g
                    let mut db = vec![0.0f32; k * n];
                    kernels::mm_tn(self.value(*a).data(), g, k, m, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::AddRowBias { a, bias } => {
                if self.wants_grad(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants_grad(*bias) {
                    let k = self.value(*bias).len();
                    let mut db = vec![0.0f64; k];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % k] += gv as f64;
                    }
                    out.push((*bias, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Reshape { a } => {
                if self.wants_grad(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let need_dx = self.wants_grad(*x);
                let need_dw = self.wants_grad(*w);
                let (dx, dw) = kernels::conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::BatchNorm(node) => {
                let s = self.value(node.x).shape();
                let plane = s.h * s.w;
                let m = (s.n * plane) as f64;
                let gamma = self.value(node.gamma).data();
                // Per-channel reductions of g and g*xhat, in f64.
                let mut sum_g = vec![0.0f64; s.c];
                let mut sum_gx = vec![0.0f64; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        for i in 0..plane {
                            let gv = g[base + i] as f64;
                            sum_g[c] += gv;
                            sum_gx[c] += gv * node.normalized[base + i] as f64;
                        }
                    }
                }
                if self.wants_grad(node.x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            let scale = gamma[c] as f64 * node.inv_std[c] as f64;
                            for i in 0..plane {
                                let gv = g[base + i] as f64;
                                let v = if node.batch_stats {
                                    scale
                                        * (gv
                                            - sum_g[c] / m
                                            - node.normalized[base + i] as f64 * sum_gx[c] / m)
                                } else {
                                    scale * gv
                                };
                                dx[base + i] = v as f32;
                            }
                        }
                    }
                    out.push((node.x, dx));
                }
                if self.wants_grad(node.gamma) {
                    out.push((node.gamma, sum_gx.iter().map(|&v| v as f32).collect()));
                }
                if self.wants_grad(node.beta) {
                    out.push((node.beta, sum_g.iter().map(|&v| v as f32).collect()));
                }
            }
            Op::AvgPool2x2 { a } => {
                if self.wants_grad(*a) {
                    let s = self.value(*a).shape();
                    let (oh, ow) = (s.h / 2, s.w / 2);
                    let mut dx = vec![0.0f32; self.value(*a).len()];
                    let mut idx = 0;
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * s.h * s.w;
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let share = 0.25 * g[idx];
                                    let p = base + 2 * oi * s.w + 2 * oj;
                                    dx[p] += share;
                                    dx[p + 1] += share;
                                    dx[p + s.w] += share;
                                    dx[p + s.w + 1] += share;
                                    idx += 1;
                                }
                            }
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::GlobalAvgPool { a } => {
                if self.wants_grad(*a) {
                    let s = self.value(*a).shape();
                    let plane = s.h * s.w;
                    let mut dx = vec![0.0f32; self.value(*a).len()];
                    for (i, &gv) in g.iter().enumerate() {
                        let share = gv / plane as f32;
                        for v in &mut dx[i * plane..(i + 1) * plane] {
                            *v = share;
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::PadChannels { a } => {
                if self.wants_grad(*a) {
                    let s = self.value(*a).shape();
                    let c_out = self.nodes[idx].value.shape().c;
                    let plane = s.h * s.w;
                    let mut dx = vec![0.0f32; self.value(*a).len()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let src = (n * c_out + c) * plane;
                            let dst = (n * s.c + c) * plane;
                            dx[dst..dst + plane].copy_from_slice(&g[src..src + plane]);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::GateChannels { a, split, lower, upper } => {
                if self.wants_grad(*a) {
                    let s = self.value(*a).shape();
                    let plane = s.h * s.w;
                    let mut dx = vec![0.0f32; g.len()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            let f = if c < *split { *lower } else { *upper };
                            for i in 0..plane {
                                dx[base + i] = f * g[base + i];
                            }
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants_grad(*logits) {
                    let s = self.value(*logits).shape();
                    let (n, k) = (s.n, s.c);
                    let scale = g[0] / n as f32;
                    let mut dx = probs.iter().map(|&p| p * scale).collect::<Vec<f32>>();
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * k + y] -= scale;
                    }
                    out.push((*logits, dx));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_with_grad(tape: &mut Tape, shape: Shape, data: Vec<f32>) -> TensorId {
        let t = Tensor::from_vec(shape, data).unwrap().with_requires_grad();
        tape.leaf(t)
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 2, 2), vec![1.5, -2.0, 0.25, 9.0]);
        let y = tape.add(z, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn add_arithmetic_and_shape_error() {
        let mut tape = Tape::new();
        let a = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let b = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![3.0, 4.0]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

        let c = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 1)));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("(1, 1, 1, 2)") && err.contains("(1, 1, 2, 1)"), "{err}");
    }

    #[test]
    fn add_backward_passes_gradient_to_both_sides() {
        let mut tape = Tape::new();
        let a = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let b = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![3.0, 4.0]);
        let y = tape.add(a, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn scale_special_cases() {
        let mut tape = Tape::new();
        let a = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![2.0, 4.0]);
        let zero = tape.scale(a, 0.0).unwrap();
        assert_eq!(tape.value(zero).data(), &[0.0, 0.0]);
        let one = tape.scale(a, 1.0).unwrap();
        assert_eq!(tape.value(one).data(), &[2.0, 4.0]);
        let half = tape.scale(a, 0.5).unwrap();
        assert_eq!(tape.value(half).data(), &[1.0, 2.0]);
        assert!(tape.scale(a, f32::NAN).is_err());
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 3), vec![5.0, -1.0, 2.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_in_gradients_sum() {
        // y = x + x => dy/dx = 2.
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![1.0, -1.0]);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
    }

    #[test]
    fn backward_on_empty_tape_is_noop() {
        let mut tape = Tape::new();
        tape.backward(TensorId(0)).unwrap();
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = leaf_with_grad(&mut tape, Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf_with_grad(&mut tape, Shape::matrix(2, 1), vec![3.0, 7.0]);
        let y = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let a = leaf_with_grad(&mut tape, Shape::matrix(2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let ones = leaf_with_grad(&mut tape, Shape::matrix(2, 1), vec![1.0, 1.0]);
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let bad = leaf_with_grad(&mut tape, Shape::matrix(3, 1), vec![0.0; 3]);
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = leaf_with_grad(&mut tape, Shape::new(1, 10, 1, 1), vec![0.3; 10]);
        let loss = tape.softmax_cross_entropy(logits, &[4]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - 10.0f32.ln()).abs() < 1e-6, "loss {v}");
    }

    #[test]
    fn cross_entropy_is_non_negative_and_vanishes_at_certainty() {
        let mut tape = Tape::new();
        for trial in 0..20 {
            let data: Vec<f32> = (0..8).map(|i| ((trial * 8 + i) as f32 * 0.77).sin() * 4.0).collect();
            let logits = leaf_with_grad(&mut tape, Shape::new(2, 4, 1, 1), data);
            let loss = tape.softmax_cross_entropy(logits, &[1, 2]).unwrap();
            assert!(tape.value(loss).data()[0] >= 0.0);
        }
        // A hugely dominant correct logit drives the loss to zero.
        let mut confident = vec![0.0f32; 4];
        confident[3] = 50.0;
        let logits = leaf_with_grad(&mut tape, Shape::new(1, 4, 1, 1), confident);
        let loss = tape.softmax_cross_entropy(logits, &[3]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = leaf_with_grad(&mut tape, Shape::new(2, 3, 1, 1), vec![0.0; 6]);
        let err = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap_err().to_string();
        assert!(err.contains("label 3"), "{err}");
        let err = tape.softmax_cross_entropy(logits, &[0]).unwrap_err().to_string();
        assert!(err.contains("1 labels"), "{err}");
    }

    #[test]
    fn pad_channels_appends_zeros_and_backward_slices() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.pad_channels(x, 4).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 4, 1, 2));
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);

        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(tape.pad_channels(x, 1).is_err());
    }

    #[test]
    fn gate_channels_scales_parts_independently() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 3, 1, 1), vec![1.0, 1.0, 1.0]);
        let y = tape.gate_channels(x, 2, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn avgpool_on_constant_input_is_constant() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, Shape::new(1, 1, 4, 4), vec![3.0; 16]);
        let y = tape.avg_pool2x2(x).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(tape.value(y).data(), &[3.0; 4]);

        let odd = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        assert!(tape.avg_pool2x2(odd).is_err());
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(
            &mut tape,
            Shape::new(1, 2, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0],
        );
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 10.0]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf_with_grad(
                &mut tape,
                Shape::new(2, 3, 4, 4),
                (0..96).map(|i| (i as f32).sin()).collect(),
            );
            let w = leaf_with_grad(
                &mut tape,
                Shape::new(5, 3, 3, 3),
                (0..135).map(|i| (i as f32 * 0.37).cos() * 0.2).collect(),
            );
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            let z = tape.relu(y).unwrap();
            let s = tape.sum(z).unwrap();
            tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(w).unwrap().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (s1, w1, x1) = run();
        let (s2, w2, x2) = run();
        assert_eq!(s1, s2);
        assert_eq!(w1, w2);
        assert_eq!(x1, x2);
    }
}

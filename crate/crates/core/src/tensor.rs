//! Dense 4-D tensors in (batch, channel, height, width) layout.
//!
//! Data is a flat row-major `f32` buffer; an optional gradient buffer of the
//! same length rides along. Gradients are accumulated by [`crate::tape::Tape`]
//! backward passes and zeroed explicitly by the training loop, never
//! implicitly.

use crate::error::{Error, Result};
use std::fmt;

/// Extents of a 4-D tensor as (n, c, h, w).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Shape of a scalar: (1, 1, 1, 1).
    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    /// A 2-D matrix viewed as (1, 1, rows, cols).
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Self::new(1, 1, rows, cols)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn is_scalar(&self) -> bool {
        self.n == 1 && self.c == 1 && self.h == 1 && self.w == 1
    }

    /// True when the tensor can be read as a bare matrix (n = c = 1).
    pub const fn is_matrix(&self) -> bool {
        self.n == 1 && self.c == 1
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::filled(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer of length {} does not fill shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Flat index of element (n, c, h, w).
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Resets the gradient accumulator to zero (allocating if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(buf) => buf.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// A copy carrying only the values, ready to enter a tape as a leaf.
    pub fn tape_copy(&self, requires_grad: bool) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.clone(),
            requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Minimal reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`] (row-major `f32`, NCHW for images). A [`Tape`]
//! records every differentiable op between a forward pass and the matching
//! [`Tape::backward`] call; gradients for trainable weights are deposited into
//! the owning [`ParamStore`]. Tapes are meant to be short-lived: build one per
//! forward/backward pair and drop it afterwards.

mod checkpoint;
mod kernels;
mod optim;
mod param;
mod rng;
mod schedule;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{accumulate_and_maybe_step, adam_step, AdamConfig, AdamState, Optimizer};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use schedule::LrSchedule;
pub use tape::{Conv2dSpec, LeafGrads, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let n = self.shape[0];
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_batch",
                format!("range {start}..{end} of batch {n}"),
            ));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Stacks equally-shaped tensors along the leading axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cat_batch of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(
                    "cat_batch",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

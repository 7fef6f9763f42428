use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Rng, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Rc<Tensor>,
    /// Locked parameters are constants to the tape and the optimizer.
    pub locked: bool,
    pub grad: Option<Vec<f32>>,
}

/// Named collection of weights belonging to one network (or one part of it).
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Copies every value bitwise into a store with a fresh identity, so the
    /// copy's gradients never mix with the original's.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Rc::new((*p.value).clone()),
                    locked: p.locked,
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Rc::new(value),
            locked: false,
            grad: None,
        });
        ParamId(id)
    }

    /// Kaiming-uniform weights for a layer with `fan_in` inputs.
    pub fn add_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in as f32).sqrt() / 2f32.sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_locked_all(&mut self, locked: bool) {
        for p in &mut self.params {
            p.locked = locked;
            if locked {
                p.grad = None;
            }
        }
    }

    /// A frozen store is read as constants by the tape without changing the
    /// per-parameter `locked` flags (used for alternating GAN phases).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn tracks(&self, id: ParamId) -> bool {
        !self.frozen && !self.params[id.0].locked
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, grad: &[f32]) -> Result<()> {
        let p = &mut self.params[index];
        if p.locked {
            return Err(Error::LockedGradient(p.name.clone()));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sum of |a - b| over all entries of two stores with identical layout.
    pub fn l1_distance(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .map(|(x, y)| (x - y).abs() as f64)
                    .sum::<f64>()
            })
            .sum()
    }

    /// True when every value matches `other` bit for bit.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Replaces a value in place; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!(
                    "`{}` is {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = Rc::new(value);
        Ok(())
    }
}

//! Named `f32` parameter blobs, bound onto a tape per forward pass.

use rand::Rng;

use super::tape::{NodeId, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Parameters in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape nodes for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps leaves pushed in store order by some other route (e.g. a gradient checker).
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self(nodes)
    }

    pub fn get(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            values,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        self.add(name, vec![fan_in, fan_out], values)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f32) -> ParamId {
        self.add(name, vec![len], vec![value; len])
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Pushes every parameter as a leaf; `trainable` controls gradient tracking.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        self.params
            .iter()
            .map(|p| {
                let values = p.values.iter().map(|&v| T::lit(v as f64)).collect();
                let t = Tensor::new(p.shape.clone(), values)?;
                Ok(tape.leaf(if trainable { t.with_grad() } else { t }))
            })
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Gradients of every parameter after `tape.backward`, zeros where none flowed.
    pub fn collect_grads<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(bound.nodes())
            .map(|(p, &id)| {
                tape.grad(id)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.values.len()])
            })
            .collect()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blobs, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "blob mismatch: expected {} {:?}, found {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
            a.values.clone_from(&b.values);
        }
        Ok(())
    }
}

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors. Names are dotted paths whose first segment is
/// the parameter group (`gen`, `refiner`, `enc`, `topic`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    /// Adds a tensor with entries drawn uniformly from `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Glorot-uniform initialised matrix.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, &[fan_in, fan_out], scale, rng)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![value; numel])?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::Shape {
                op: "set",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters whose name starts with `group.`, in insertion order.
    pub fn group(&self, group: &str) -> Vec<ParamId> {
        let prefix = format!("{group}.");
        self.ids()
            .filter(|id| self.names[id.0].starts_with(&prefix))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Zeroes (allocating if needed) the gradients of `ids` only.
    pub fn zero_grads_of(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.tensors[id.0].zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds the parameter-leaf gradients held by `tape` into this store.
    pub fn accumulate_from(&mut self, tape: &super::Tape) {
        for (id, grad) in tape.param_grads() {
            self.tensors[id.0].accumulate_grad(grad);
        }
    }

    /// Order-stable fingerprint over the values of the given parameters.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for id in ids {
            self.names[id.0].hash(&mut h);
            for x in self.tensors[id.0].data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn num_values(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.tensors[id.0].numel()).sum()
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

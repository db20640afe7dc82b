use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Visual extractor projections.
    Visual,
    /// Fusion, bridge and the encoder-decoder.
    Model,
    /// Text embedding table, frozen unless explicitly released.
    Text,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: ParamGroup,
    param: Parameter,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            param: Parameter::new(value, true),
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Seeded Gaussian initialization.
    pub fn add_normal(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn add_zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].param.value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].param.value
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0].param
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0].param
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].param.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.param.zero_grad();
        }
    }

    /// Allocate an empty gradient buffer matching every parameter.
    pub fn grads(&self) -> Grads {
        Grads(
            self.entries
                .iter()
                .map(|e| Tensor::zeros(e.param.value.shape()))
                .collect(),
        )
    }

    /// Add a per-sample gradient buffer into the stored parameter grads.
    pub fn accumulate(&mut self, grads: &Grads, scale: f64) {
        for (e, g) in self.entries.iter_mut().zip(&grads.0) {
            e.param.grad.add_scaled(g, scale);
        }
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.param.value.clone()))
            .collect()
    }

    /// Overwrite values from a named list; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .get(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let slot = &mut self.entries[id.0].param.value;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} vs checkpoint {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Gradient buffers, one per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        self.0[id.0].add_assign(g);
    }

    pub fn add_grads(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, scale);
        }
    }
}

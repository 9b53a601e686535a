//! Named trainable parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct Params<T> {
    list: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            list: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Parameter {
                name,
                detail: "duplicate parameter name".into(),
            });
        }
        let id = self.list.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.list.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    /// Adds a tensor drawn uniformly from `[-scale, scale)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(rng.uniform(-scale, scale))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::from_f64c(value)))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.list[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.list[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.list[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.list.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.list.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.list.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.list.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.list {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            list: self
                .list
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of an existing parameter, requiring an identical shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::Parameter {
            name: name.into(),
            detail: "unknown parameter".into(),
        })?;
        let p = &mut self.list[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Parameter {
                name: name.into(),
                detail: format!("shape {:?} does not match expected {:?}", value.shape(), p.value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }
}

//! Named parameter registry.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub(crate) value: Rc<Tensor>,
    pub grad: Tensor,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Owns every learnable tensor of a model, addressed by [`ParamId`] or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value: Rc::new(value),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces a parameter's value; the shape is fixed at creation.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

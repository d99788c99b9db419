//! Named dense parameter arrays with gradient slots.
//!
//! Values are kept in `f64` for computation but every value written by
//! initialization or by the optimizer is rounded to the nearest `f32`, so a
//! checkpoint storing 32-bit floats round-trips bit-exactly.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which side of the joint objective owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Matching network and prediction head.
    Encoder,
    /// Mutual-information critic.
    Discriminator,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub value: Mat,
    pub grad: Mat,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Values are rounded to `f32` precision.
    pub fn register(&mut self, name: &str, group: Group, mut value: Mat) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        value.mapv_inplace(round_f32);
        let id = ParamId(self.params.len());
        let grad = Mat::zeros(value.raw_dim());
        self.params.push(Parameter {
            name: name.to_string(),
            group,
            trainable: true,
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Fan-in scaled uniform weights in `[-1/sqrt(rows), 1/sqrt(rows)]`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        group: Group,
        shape: (usize, usize),
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (shape.0.max(1) as f64).sqrt();
        let value = Mat::from_shape_fn(shape, |_| rng.random_range(-bound..=bound));
        self.register(name, group, value)
    }

    pub fn register_zeros(&mut self, name: &str, group: Group, shape: (usize, usize)) -> Result<ParamId> {
        self.register(name, group, Mat::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Overwrites a value without rounding; used by finite-difference checks.
    pub fn set_value(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Sets every value in a group to zero.
    pub fn zero_group(&mut self, group: Group) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Mat) {
        let p = &mut self.params[id.0];
        if p.trainable {
            p.grad += grad;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

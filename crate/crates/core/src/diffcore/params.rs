//! Named parameter storage shared by every graph built for a model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::Shape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if data.len() != shape.numel() {
            return Err(Error::dim("param", shape, format!("{} values for {name}", data.len())));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter {
            name,
            shape,
            data,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        self.add(name, shape, vec![0.0; shape.numel()])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: Shape, v: f64) -> Result<ParamId> {
        self.add(name, shape, vec![v; shape.numel()])
    }

    /// Uniform in ±1/sqrt(fan_in), the usual linear-layer initialization.
    pub fn linear_init<R: Rng>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> Result<ParamId> {
        let bound = 1.0 / (shape.rows as f64).sqrt();
        let data = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn normal_init<R: Rng>(&mut self, name: impl Into<String>, shape: Shape, std: f64, rng: &mut R) -> Result<ParamId> {
        let data = (0..shape.numel()).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        self.add(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

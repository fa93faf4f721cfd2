use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngState;
use crate::tensor::Matrix;

/// How a parameter is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±1/√fan_in, fan_in = rows.
    FanInUniform,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub init: Init,
}

/// Named trainable tensors plus non-trainable buffers (normalization running statistics).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngState,
    ) -> Result<&Matrix> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::FanInUniform => {
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                Matrix::from_vec(rows, cols, data)?
            }
        };
        self.params.insert(name.to_string(), Param { value, init });
        Ok(&self.params[name].value)
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.params.insert(
            name.to_string(),
            Param {
                value,
                init: Init::Zeros,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    /// Fetches a parameter and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<&Matrix> {
        let m = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if m.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        Ok(m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), &mut p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Matrix> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Matrix) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
            && self.buffers.values().all(Matrix::is_finite)
    }
}

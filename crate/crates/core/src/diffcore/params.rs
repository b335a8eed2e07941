use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, row-major learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("{name}: zero-sized dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name}[{i}]")));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// (rows, cols) for a matrix; a vector is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (self.shape[0], self.numel() / self.shape[0]),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[r * c..(r + 1) * c]
    }
}

/// Flat storage of every learnable tensor in a model, addressable by id or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: ParamTensor) -> Result<ParamId> {
        if self.by_name.contains_key(&tensor.name) {
            return Err(Error::DuplicateParameter(tensor.name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(tensor.name.clone(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        self.insert(ParamTensor::new(name, shape, values)?)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)) for a `[fan_out, fan_in]` matrix.
    pub fn glorot<R: Rng>(
        &mut self,
        name: &str,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_out * fan_in)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, vec![fan_out, fan_in], values)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    /// Tensors in name order.
    pub fn sorted(&self) -> impl Iterator<Item = &ParamTensor> {
        self.by_name.values().map(|id| &self.tensors[id.0])
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    /// Overwrite values from `other`, matching tensors by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for t in &mut self.tensors {
            let src = other.get(other.id(&t.name)?);
            if src.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    t.name, t.shape, src.shape
                )));
            }
            t.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

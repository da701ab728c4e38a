//! Flat parameter storage with named tensor views.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize]) -> usize {
        let offset = self.len;
        let spec = TensorSpec { name: name.into(), dims: dims.to_vec(), offset };
        self.len += spec.len();
        self.tensors.push(spec);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor that owns flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.tensors.iter().find(|t| t.range().contains(&i)).map(|t| t.name.as_str())
    }

    /// First non-finite entry, reported by tensor name.
    pub fn check_finite(&self, values: &[f64]) -> Result<()> {
        match values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFiniteGradient { param: self.owner(i).unwrap_or("?").to_string() }),
        }
    }
}

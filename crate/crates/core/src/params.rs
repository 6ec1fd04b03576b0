use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every entry into `out` under `prefix`.
    pub fn export(&self, prefix: &str, out: &mut ParamSet<T>) -> Result<()> {
        for (n, t) in &self.entries {
            out.push(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Overwrites every entry from `src[prefix + name]`, checking dims.
    pub fn import(&mut self, prefix: &str, src: &ParamSet<T>) -> Result<()> {
        for (n, t) in &mut self.entries {
            let key = format!("{prefix}{n}");
            let found = src.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if found.dims() != t.dims() {
                return Err(Error::Checkpoint(format!("tensor {key}: dims {:?}, expected {:?}", found.dims(), t.dims())));
            }
            *t = found.clone();
        }
        Ok(())
    }
}

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("{dims:?}"), "extents must be positive"));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                "data",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new extents.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    /// Slice `[index, ...]` along the leading axis.
    pub fn outer(&self, index: usize) -> &[T] {
        let stride = self.data.len() / self.dims[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::dim(
                op,
                "rank",
                format!("expected rank {rank}, got dims {:?}", self.dims),
            ));
        }
        Ok(())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

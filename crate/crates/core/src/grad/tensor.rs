use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`, at most two dimensions in practice.
///
/// A shape of `[]` is a scalar holding one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor value at flat index {pos} is {}",
                values[pos]
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

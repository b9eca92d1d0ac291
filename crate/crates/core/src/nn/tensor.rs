//! Flat dense tensors.
//!
//! Layer code works directly on `data` with explicit stride math; the struct
//! only carries the shape so parameter registries and checkpoints can move
//! whole tensors around. Layout is row-major with the last axis fastest,
//! which for feature maps means channel-major, x-fastest.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Zero tensor with the same shape, for gradient accumulators.
    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(&self.shape)
    }
}

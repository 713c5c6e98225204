//! Dense row-major f32 tensors and their shapes.
//!
//! This is the universal value type of the training path. Data is a flat
//! `Vec<f32>` in row-major order; no strides, no views, no broadcasting.

use crate::error::{LnsError, Result};

/// Ordered list of positive extents, e.g. `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(LnsError::InvalidArgument {
                op: "Shape::new",
                msg: format!("every extent must be >= 1, got {dims:?}"),
            });
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(LnsError::InvalidArgument {
                op: "Tensor::from_vec",
                msg: format!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims).expect("zeros: extents must be positive");
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let shape = Shape::new(dims).expect("filled: extents must be positive");
        let n = shape.numel();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    /// Extent of axis `i`; panics on out-of-range axis (programming error).
    pub fn dim(&self, i: usize) -> usize {
        self.shape.dims()[i]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(LnsError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }
}

//! Plain dense tensors and binary masks.
//!
//! `Tensor` is the value type passed around by the rest of the crate:
//! a row-major `f64` array with an explicit shape. Gradients live on the
//! autograd tape, not here. `BinaryMask` is the label type for binary
//! segmentation; its constructor enforces {0,1} values so downstream code
//! never has to re-validate.

use crate::error::{Error, Result};

/// Shaped, row-major, 64-bit float array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `data.len() == product(shape)` and all
    /// dimensions are positive.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            data: vec![0.0; numel],
            shape,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            data: vec![value; numel],
            shape,
        }
    }

    /// Shape-`[1]` tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when this tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// All elements finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// {0,1}-valued segmentation label of height `h` and width `w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    /// Build a mask, rejecting any value other than 0 or 1.
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidInput(format!(
                "mask {h}x{w} needs {} bytes, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "mask values must be 0 or 1, got {v}"
            )));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fraction of pixels labeled 1.
    pub fn positive_fraction(&self) -> f64 {
        let ones: usize = self.data.iter().map(|&v| v as usize).sum();
        ones as f64 / self.data.len() as f64
    }

    /// The mask as a `[1, h, w]` float tensor (for use as a loss target).
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.h, self.w],
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_is_validated() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 1]).is_ok());
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn mask_round_trips_to_tensor() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let t = m.to_tensor();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!((m.positive_fraction() - 0.5).abs() < 1e-15);
    }
}

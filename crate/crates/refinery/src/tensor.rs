//! Dense rank-4 tensors and integer label maps.
//!
//! All feature maps, score maps and learnable weights in this crate are
//! `Tensor`s: dense, row-major f64 arrays with a fixed (batch, channel,
//! height, width) shape. Weights of a convolution use the layout
//! (out_channels, in_channels, kh, kw); biases use (1, out_channels, 1, 1).

use crate::error::{Error, Result};
use std::fmt;

/// Label value excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) -> &mut Self {
        self.requires_grad = on;
        self
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Sum `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared L2 norm of the data.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Integer class-index map with shape (n, h, w). Values are class indices in
/// [0, K) or [`IGNORE_LABEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        MaskTensor {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "mask",
                format!("data length {} does not match {}x{}x{}", data.len(), n, h, w),
            ));
        }
        Ok(MaskTensor { n, h, w, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, y: usize, x: usize) -> usize {
        (n * self.h + y) * self.w + x
    }

    #[inline(always)]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[self.idx(n, y, x)]
    }

    /// Distinct labels present, ignore included if present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0u16..256)
            .filter(|&v| seen[v as usize])
            .map(|v| v as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(err.is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), s.numel() - 1);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 1, 2)).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn mask_label_set() {
        let m = MaskTensor::from_vec(1, 2, 2, vec![0, 3, 3, IGNORE_LABEL]).unwrap();
        assert_eq!(m.label_set(), vec![0, 3, IGNORE_LABEL]);
    }
}

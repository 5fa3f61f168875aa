//! Dense rank-4 tensors in NCHW layout.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a rank-4 tensor: batch, channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn with_batch(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

/// Double-precision NCHW tensor with an optional gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Tensor4 { shape, data: vec![0.0; shape.len()], grad: None }
    }

    pub fn filled(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Tensor4 { shape, data: vec![value; shape.len()], grad: None }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data, grad: None })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    /// The `n`-th batch item as a contiguous slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` out as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Tensor4 {
        Tensor4 { shape: self.shape.with_batch(1), data: self.item(n).to_vec(), grad: None }
    }

    /// Stacks batch-of-any tensors of identical item shape along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::InvalidArgument(format!("cannot stack {s} with {first}")));
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Ok(Tensor4 { shape: first.with_batch(n), data, grad: None })
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient length {} does not match tensor {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidArgument(format!("axpy of {} into {}", other.shape, self.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<[usize; 4]> for Tensor4 {
    type Output = f64;

    fn index(&self, [n, c, h, w]: [usize; 4]) -> &f64 {
        &self.data[self.shape.offset(n, c, h, w)]
    }
}

impl IndexMut<[usize; 4]> for Tensor4 {
    fn index_mut(&mut self, [n, c, h, w]: [usize; 4]) -> &mut f64 {
        let off = self.shape.offset(n, c, h, w);
        &mut self.data[off]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let t = Tensor4::from_vec([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(t[[0, 1, 0, 1]], 5.0);
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor4::zeros([2, 1, 3, 3]);
        assert!(t.set_grad(vec![0.0; 17]).is_err());
        t.set_grad(vec![1.0; 18]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 18);
    }

    #[test]
    fn stack_and_split_batches() {
        let a = Tensor4::filled([1, 2, 2, 2], 1.0);
        let b = Tensor4::filled([1, 2, 2, 2], 2.0);
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape4::new(2, 2, 2, 2));
        assert_eq!(s.batch_item(1), b);
        assert!(Tensor4::stack(&[&a, &Tensor4::zeros([1, 1, 2, 2])]).is_err());
    }
}

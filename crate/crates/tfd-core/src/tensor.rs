//! Dense 4-D tensors (batch x channel x height x width) over contiguous,
//! row-major 64-bit reals. Vectors and scalars use degenerate extents.
//! Data is behind `Arc`, so clones are cheap and plain tensor math is freely
//! shareable across threads; no operation mutates its inputs.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

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

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
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
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(alloc::format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// He-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn he_uniform(shape: Shape, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = crate::math::sqrt(6.0 / fan_in as f64);
        let data = (0..shape.numel())
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && h < s.h && w < s.w);
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && h < s.h && w < s.w);
        self.data_mut()[((n * s.c + c) * s.h + h) * s.w + w] = v;
    }

    /// One channel plane of one batch item, as a contiguous slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let s = self.shape;
        let base = (n * s.c + c) * s.h * s.w;
        &self.data[base..base + s.h * s.w]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| k * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// In-place `self += k * other`; shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += k * s;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

/// Stack 1 x C x H x W tensors into one N x C x H x W batch.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let s = first.shape();
    let mut out = Tensor::zeros(Shape::new(items.len(), s.c, s.h, s.w));
    let per = s.numel();
    {
        let d = out.data_mut();
        for (i, item) in items.iter().enumerate() {
            if item.shape() != s {
                return Err(Error::shape("stack_batch", &s, &item.shape()));
            }
            d[i * per..(i + 1) * per].copy_from_slice(item.data());
        }
    }
    Ok(out)
}

/// max(|a - b|) over all elements; shapes must already agree.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| crate::math::abs(x - y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_numel_and_indexing() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        let mut t = Tensor::zeros(s);
        t.set(1, 2, 3, 4, 7.5);
        assert_eq!(t.at(1, 2, 3, 4), 7.5);
        assert_eq!(t.data()[119], 7.5);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).is_err());
    }

    #[test]
    fn elementwise_shape_error_names_both_shapes() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let err = a.add(&b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("1x1x2x2") && msg.contains("1x2x2x2"), "{msg}");
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let b = a.clone();
        let _ = a.map(|x| x * 2.0);
        let _ = a.add(&b).unwrap();
        let _ = a.scale(5.0);
        assert_eq!(a, b);
    }
}

//! Dense row-major f64 tensors.
//!
//! Only the operations the networks and solvers need are provided: matmul,
//! elementwise arithmetic, scaling, and accumulation. Every public operation
//! validates shapes and rejects non-finite results so numerical faults surface
//! at the op that produced them, not three modules downstream.
//!
//! Shapes are explicit: `[]` is a scalar, `[n]` a vector, `[r, c]` a matrix.
//! Data is stored row-major; reshapes that preserve the element count are
//! free.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Tensor of the given shape with every entry set to `v`.
    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; len] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    /// Build from raw row-major data; the length must match the shape and all
    /// entries must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "from_vec: shape {shape:?} wants {expect} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.assert_finite("from_vec")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. The caller is responsible for keeping entries
    /// finite; public operations re-validate their own outputs.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a rank-0 (or single-element) tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "scalar_value: tensor with shape {:?} is not a scalar",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elems) -> {shape:?} ({expect} elems)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul: both operands must be rank 2, got {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (aik, brow) in arow.iter().zip(rhs.data.chunks_exact(m)) {
                let aik = *aik;
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let t = Tensor { shape: vec![n, m], data: out };
        t.assert_finite("matmul")?;
        Ok(t)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product; shapes must match.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    /// Multiply every entry by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.assert_finite("scale")?;
        Ok(t)
    }

    /// In-place `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_scaled: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        self.assert_finite("add_scaled")
    }

    /// Sum of entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of squared entries.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    /// Error if any entry is NaN or infinite.
    pub fn assert_finite(&self, ctx: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx))
        }
    }

    fn zip_with(&self, rhs: &Tensor, ctx: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{ctx}: shape mismatch {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.assert_finite(ctx)?;
        Ok(t)
    }
}

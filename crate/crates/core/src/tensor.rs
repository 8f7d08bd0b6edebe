//! Dense row-major tensors of 64-bit reals.
//!
//! Storage is a contiguous, reference-counted buffer. Cloning a tensor is
//! cheap (an `Arc` bump), which lets model parameters be shared between the
//! parameter store, recorded computation graphs, and benchmark replicas
//! without copying. Mutation goes through [`Tensor::data_mut`], which is
//! copy-on-write when the buffer is shared.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Standard-normal draw via Box-Muller; keeps init reproducible from the
/// raw uniform stream alone.
pub fn sample_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * sample_normal(rng)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows have unequal lengths".to_string()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer; copies when the buffer is shared.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::shape(format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn n_rows(&self) -> usize {
        match self.shape.split_last() {
            Some((last, rest)) if *last > 0 => rest.iter().product(),
            _ => 0,
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact bitwise equality, including shape.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Append the rows of a rank-2 tensor to this rank-2 tensor in place.
    pub fn append_rows(&mut self, rows: &Tensor) -> Result<()> {
        let (_, c) = self.dims2()?;
        let (n, c2) = rows.dims2()?;
        if c != c2 {
            return Err(Error::shape(format!(
                "append_rows: width {c2} does not match {c}"
            )));
        }
        Arc::make_mut(&mut self.data).extend_from_slice(rows.data());
        self.shape[0] += n;
        Ok(())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn data_mut_is_copy_on_write() {
        let t = Tensor::zeros(vec![4]);
        let mut u = t.clone();
        u.data_mut()[0] = 1.0;
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(u.data()[0], 1.0);
    }

    #[test]
    fn bit_eq_distinguishes_negative_zero() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert_eq!(a.max_abs_diff(&b), Some(0.0));
    }
}

//! Dense row-major tensors, the universal value carrier.

use crate::error::{Error, Result};

/// Compute element type. 64-bit by default; the `f32` cargo feature switches
/// the whole crate to 32-bit storage and arithmetic.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Dense multi-dimensional array with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    /// Build a tensor, validating the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    /// Like `new` but skips validation; for internal hot paths whose inputs
    /// are already finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<Real>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite element {} at flat index {idx}",
                self.data[idx]
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "zip_map on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// First axis length; errors on rank-0.
    pub fn batch_len(&self) -> Result<usize> {
        self.shape
            .first()
            .copied()
            .ok_or_else(|| Error::Contract("batch_len on rank-0 tensor".into()))
    }

    /// Number of elements per leading-axis entry.
    pub fn example_stride(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Row-major slice of example `i` along the first axis.
    pub fn example(&self, i: usize) -> &[Real] {
        let stride = self.example_stride();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [Real] {
        let stride = self.example_stride();
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Index of the largest value in each row of a 2-D tensor; first index wins ties.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "argmax_rows on rank-{} tensor",
                self.rank()
            )));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks_exact(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// L2 norm of a slice.
pub fn l2_norm(v: &[Real]) -> Real {
    v.iter().map(|&x| x * x).sum::<Real>().sqrt()
}

/// L-infinity norm of a slice.
pub fn linf_norm(v: &[Real]) -> Real {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, Real::NAN]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn example_slicing() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.example(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.example_stride(), 3);
    }

    #[test]
    fn argmax_ties_take_first() {
        let t = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.0, 0.1, 0.2, 0.7]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![0, 2]);
    }

    #[test]
    fn norms() {
        assert!((l2_norm(&[3.0, 4.0]) - 5.0).abs() < 1e-12);
        assert!((linf_norm(&[-2.5, 1.0]) - 2.5).abs() < 1e-12);
    }
}

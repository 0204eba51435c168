use std::sync::Arc;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Dense n-dimensional array. Immutable after creation; clones share storage.
///
/// Layout conventions used throughout the crate:
/// - feature maps have shape `[w, h, c]` with element `(x, y, ch)` stored at
///   `(y * w + x) * c + ch`, so the zero-copy matrix view of a map is
///   `[w * h, c]` (positions by rows, channels by columns);
/// - matrices have shape `[rows, cols]`, row-major;
/// - scalars have shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim(
                "tensor_new",
                format!("shape {:?} implies {} elements, got {}", shape, count, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: data.into() })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); count].into() }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; count].into() }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v].into() }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..count).map(|i| f(i)).collect::<Vec<_>>().into() }
    }

    /// Uniform draw in `[-bound, bound)` from the given deterministic stream.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl RngCore) -> Self {
        Self::from_fn(shape, |_| sc((unit_f64(rng) * 2.0 - 1.0) * bound))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Same storage under a different shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    /// Feature-map accessor; shape must be `[w, h, c]`.
    #[inline]
    pub fn at3(&self, x: usize, y: usize, ch: usize) -> T {
        let (w, c) = (self.shape[0], self.shape[2]);
        self.data[(y * w + x) * c + ch]
    }

    /// Matrix accessor; shape must be `[rows, cols]`.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    /// NaN/Inf detection; corrupt state is checkable on demand.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_precision<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect::<Vec<_>>().into(),
        }
    }

    /// Replace one element; used by finite-difference probes.
    pub fn with_element(&self, idx: usize, v: T) -> Self {
        let mut data = self.data.to_vec();
        data[idx] = v;
        Tensor { shape: self.shape.clone(), data: data.into() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }
}

/// Uniform f64 in [0, 1) from the top 53 bits of the stream. Used instead of
/// distribution adapters so byte-level determinism stays under our control.
#[inline]
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::SeedableRng;

    #[test]
    fn shape_element_count_enforced() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn reshape_preserves_count_and_storage() {
        let t = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let v = t.reshape(&[4]).unwrap();
        assert_eq!(v.data(), t.data());
        assert!(t.reshape(&[3]).is_err());
    }

    #[test]
    fn finiteness_detectable() {
        let t = Tensor::new(&[2], vec![1.0f64, f64::NAN]).unwrap();
        assert!(!t.all_finite());
        assert!(Tensor::<f64>::ones(&[2]).all_finite());
    }

    #[test]
    fn uniform_bound_respected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::uniform(&[1000], 0.3, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.3));
    }
}

//! Dense row-major tensors.
//!
//! Images use channels-last `(H, W, C)` layout. Reductions combine elements in
//! a fixed-order binary tree so that serial and parallel evaluation agree
//! bitwise (see [`Tensor::reduce`]).

use std::fmt;

use num_traits::{Float, NumCast};

use crate::error::{parameter, Error, Result};

/// Element type for tensors: `f32` for production work, `f64` for gradient
/// verification.
pub trait Scalar:
    Float + NumCast + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; the single place precision is dropped.
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Reduction flavors understood by [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Dense N-dimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Chunks below this length are summed serially left-to-right; above it the
/// range is split at the midpoint. The tree depends only on the length, never
/// on worker count.
const TREE_LEAF: usize = 1024;
/// Minimum length before a tree reduction bothers forking to rayon.
const PAR_THRESHOLD: usize = 1 << 16;

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and its row-major elements.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return parameter("tensor shape must have at least one dimension");
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return parameter(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                count,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty(), "tensor shape must be non-empty");
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    /// Element (row-major index order) computed from its multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        assert!(!shape.is_empty(), "tensor shape must be non-empty");
        let count: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the elements under a new shape of identical volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count != self.data.len() {
            return parameter(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn at_mut(&mut self, index: &[usize]) -> &mut T {
        let off = self.offset(index);
        &mut self.data[off]
    }

    #[inline]
    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i], "index {:?} out of {:?}", index, self.shape);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Elementwise combination; shapes must match.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Sync) -> Result<Self> {
        if self.shape != other.shape {
            return parameter(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += other * scale`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        if self.shape != other.shape {
            return parameter(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * scale;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Fixed-order reduction. The combination tree is a function of the element
    /// count alone, so results are bitwise identical no matter how many rayon
    /// workers participate.
    pub fn reduce(&self, kind: Reduction) -> Result<T> {
        if self.data.is_empty() {
            return parameter("cannot reduce an empty tensor");
        }
        Ok(match kind {
            Reduction::Sum => tree_sum(&self.data),
            Reduction::Mean => {
                tree_sum(&self.data) / T::from_f64(self.data.len() as f64)
            }
            Reduction::Max => tree_fold(&self.data, |a, b| if b > a { b } else { a }),
        })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }

    /// Precision cast; element order is preserved.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Largest absolute element, 0 for the empty tensor.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }
}

/// Fixed-tree sum over a slice. Exposed so other modules can reduce
/// intermediate buffers with the same deterministic order.
pub fn tree_sum<T: Scalar>(xs: &[T]) -> T {
    tree_fold(xs, |a, b| a + b)
}

fn tree_fold<T: Scalar>(xs: &[T], combine: fn(T, T) -> T) -> T {
    debug_assert!(!xs.is_empty());
    if xs.len() <= TREE_LEAF {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = combine(acc, x);
        }
        return acc;
    }
    let mid = xs.len() / 2;
    let (lo, hi) = xs.split_at(mid);
    if xs.len() >= PAR_THRESHOLD {
        let (a, b) = rayon::join(|| tree_fold(lo, combine), || tree_fold(hi, combine));
        combine(a, b)
    } else {
        combine(tree_fold(lo, combine), tree_fold(hi, combine))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent serial evaluation of the documented reduction tree.
    fn serial_tree_sum(xs: &[f32]) -> f32 {
        if xs.len() <= TREE_LEAF {
            return xs[1..].iter().fold(xs[0], |a, &b| a + b);
        }
        let mid = xs.len() / 2;
        serial_tree_sum(&xs[..mid]) + serial_tree_sum(&xs[mid..])
    }

    #[test]
    fn sum_of_small_tensor() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        assert_eq!(t.reduce(Reduction::Sum).unwrap(), 6.0);
    }

    #[test]
    fn mean_of_constant_tensor() {
        // Dyadic constant: every partial sum is exact, so the mean is too.
        let t = Tensor::<f32>::full(&[7, 5], 0.375);
        assert_eq!(t.reduce(Reduction::Mean).unwrap(), 0.375);
        let t = Tensor::<f32>::full(&[9, 4], 0.37);
        assert!((t.reduce(Reduction::Mean).unwrap() - 0.37).abs() < 1e-6);
    }

    #[test]
    fn max_reduction() {
        let t = Tensor::new(&[4], vec![-3.0f32, 7.0, 2.0, -9.0]).unwrap();
        assert_eq!(t.reduce(Reduction::Max).unwrap(), 7.0);
    }

    #[test]
    fn empty_reduce_is_parameter_error() {
        let t = Tensor::<f32>::zeros(&[0, 4]);
        assert!(matches!(
            t.reduce(Reduction::Sum),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn parallel_sum_matches_serial_tree_bitwise() {
        // Values chosen so ordering matters in f32.
        let xs: Vec<f32> = (0..300_000)
            .map(|i| ((i as f32) * 0.001).sin() * 1e3 + 1e-3)
            .collect();
        let t = Tensor::new(&[xs.len()], xs.clone()).unwrap();
        let expected = serial_tree_sum(&xs);

        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let s1 = pool1.install(|| t.reduce(Reduction::Sum).unwrap());
        let s4 = pool4.install(|| t.reduce(Reduction::Sum).unwrap());
        assert_eq!(s1.to_bits(), expected.to_bits());
        assert_eq!(s4.to_bits(), expected.to_bits());
    }

    #[test]
    fn shape_volume_must_match() {
        assert!(Tensor::new(&[2, 3], vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn from_fn_walks_row_major() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |ix| (ix[0] * 3 + ix[1]) as f32);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }
}

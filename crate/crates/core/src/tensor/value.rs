use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, shape_err, Result};

/// Dense row-major array of 64-bit reals.
///
/// A rank-0 tensor (empty `dims`) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(shape_err!("zero extent in dims {:?}", dims));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {:?} hold {} values but {} were given",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor whose shape is already known to be consistent.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        Self::from_parts(dims.to_vec(), vec![v; dims.iter().product()])
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| rng.gen_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(contract_err!(
                "item() on tensor with dims {:?}",
                self.dims
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.dims,
                dims
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {:?} out of bounds for {:?}", index, self.dims);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Matrix rows/cols of the trailing two axes, plus the leading batch size.
    pub(crate) fn batch_matrix_dims(&self) -> Option<(usize, usize, usize)> {
        let r = self.dims.len();
        if r < 2 {
            return None;
        }
        let batch = self.dims[..r - 2].iter().product();
        Some((batch, self.dims[r - 2], self.dims[r - 1]))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.dims)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

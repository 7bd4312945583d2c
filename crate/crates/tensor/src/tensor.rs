use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Dense row-major array. Layout for images is (batch, channels, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(shape_err!("zero extent in dims {dims:?}"));
        }
        if numel(&dims) != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {} values but {} were supplied",
                numel(&dims),
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        Self { dims, data: vec![value; n] }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let data = (0..numel(&dims))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self { dims, data }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let data = (0..numel(&dims))
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff over mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Splits a (B, C, H, W) tensor into its four extents.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err!("expected (B, C, H, W), got {:?}", self.dims)),
        }
    }
}

//! Rank-4 tensor in (n, c, h, w) row-major order, the carrier for all layer math.

use num_traits::Float;
use std::fmt;

/// Element type for kernels. f32 is the training/inference default; f64 exists
/// for gradient checking.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "data length must equal n*c*h*w");
        Tensor { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View a (n, d) matrix tensor stored as (n, d, 1, 1).
    pub fn matrix(n: usize, d: usize, data: Vec<T>) -> Self {
        Self::from_vec(n, d, 1, 1, data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor({}, {}, {}, {}; {} elems)",
            self.n,
            self.c,
            self.h,
            self.w,
            self.data.len()
        )
    }
}

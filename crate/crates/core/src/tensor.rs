use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; verification code
/// may run the same kernels in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
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

/// Shape of a 5-D tensor: batch, channels, depth, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape5(pub [usize; 5]);

impl Shape5 {
    pub fn new(b: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5([b, c, d, h, w])
    }
    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn channels(&self) -> usize {
        self.0[1]
    }
    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }
    pub fn spatial_len(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [b, c, d, h, w] = self.0;
        write!(f, "{b}x{c}x{d}x{h}x{w}")
    }
}

/// Dense 5-D tensor, laid out batch-major, then channel, then z, y, x.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T = f32> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape5, value: T) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor5::from_vec", shape.len(), data.len()));
        }
        Ok(Tensor5 { shape, data })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape5, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor5 { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape5, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, cs, d, h, w] = self.shape.0;
        (((b * cs + c) * d + z) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, z, y, x)]
    }

    /// Contiguous slice for one (batch, channel) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.spatial_len();
        let start = (b * self.shape.channels() + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.shape.spatial_len();
        let start = (b * self.shape.channels() + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor5<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor5::add_assign", self.shape, other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += *b);
        Ok(())
    }

    pub fn dot(&self, other: &Tensor5<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape("Tensor5::reshape", self.data.len(), shape.len()));
        }
        Ok(Tensor5 {
            shape,
            data: self.data,
        })
    }

    /// Selects one batch item, keeping a batch axis of length 1.
    pub fn batch_item(&self, b: usize) -> Tensor5<T> {
        let per = self.shape.len() / self.shape.batch().max(1);
        let [_, c, d, h, w] = self.shape.0;
        Tensor5 {
            shape: Shape5::new(1, c, d, h, w),
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor5<T>]) -> Result<Tensor5<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack_batch of zero tensors".into()))?;
        let [_, c, d, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            let [tb, tc, td, th, tw] = t.shape.0;
            if [tc, td, th, tw] != [c, d, h, w] {
                return Err(Error::shape("stack_batch", first.shape, t.shape));
            }
            batch += tb;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor5 {
            shape: Shape5::new(batch, c, d, h, w),
            data,
        })
    }
}

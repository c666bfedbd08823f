//! Batched image storage shared by every stage of the pipeline.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Computation runs in `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    /// Full-range YCbCr with chroma centered at zero.
    YCbCr,
}

/// Batch of images laid out as `(B, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f32> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
    color_space: ColorSpace,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(
        shape: [usize; 4],
        data: Vec<T>,
        color_space: ColorSpace,
    ) -> Result<Self> {
        let [batch, channels, height, width] = shape;
        let len = batch * channels * height * width;
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
            color_space,
        })
    }

    pub fn zeros(shape: [usize; 4], color_space: ColorSpace) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len], color_space).unwrap()
    }

    pub fn filled(shape: [usize; 4], value: T, color_space: ColorSpace) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len], color_space).unwrap()
    }

    /// RGB batch built from per-sample buffers of equal length `3·H·W`.
    pub fn from_samples(samples: &[Vec<T>], height: usize, width: usize) -> Result<Self> {
        let per = 3 * height * width;
        let mut data = Vec::with_capacity(samples.len() * per);
        for s in samples {
            if s.len() != per {
                return Err(Error::shape(format!(
                    "sample has {} values, expected {per}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Self::new([samples.len(), 3, height, width], data, ColorSpace::Rgb)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
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

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (b * self.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (b * self.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copies of the samples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            batch: indices.len(),
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
            color_space: self.color_space,
        }
    }

    /// Same shape and color space, new contents.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.shape(), data, self.color_space)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone_meta()
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone_meta()
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            color_space: self.color_space,
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub(crate) fn set_color_space(&mut self, cs: ColorSpace) {
        self.color_space = cs;
    }
}

/// `‖a − b‖∞` per sample.
pub fn linf_per_sample<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Vec<f64> {
    (0..a.batch())
        .map(|i| {
            a.sample(i)
                .iter()
                .zip(b.sample(i))
                .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs().as_f64()))
        })
        .collect()
}

/// `‖a − b‖₂` per sample.
pub fn l2_per_sample<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Vec<f64> {
    (0..a.batch())
        .map(|i| {
            a.sample(i)
                .iter()
                .zip(b.sample(i))
                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

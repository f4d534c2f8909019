//! Row-major 2D scalar fields: gray images, soft masks and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A dense row-major 2D grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Intensity image, values in `[0, 1]` after preprocessing.
pub type GrayImage = Plane<f32>;

/// Per-pixel confidence map in `[0, 1]`.
pub type SoftMask = Plane<f32>;

/// Hard foreground/background labels.
pub type BinaryMask = Plane<bool>;

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "plane must be non-empty, got {height}x{width}");
        ensure!(
            data.len() == height * width,
            "plane data length {} does not match {height}x{width}",
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "plane must be non-empty");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "plane must be non-empty");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.width + j] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Plane<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_f64(&self) -> Plane<f64> {
        self.map(|v| v as f64)
    }

    /// Binarize at `threshold` (strictly greater is foreground).
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        self.map(|v| v > threshold)
    }
}

impl Plane<bool> {
    /// Converts a float plane whose values are exactly 0 or 1.
    pub fn try_from_values(values: &Plane<f32>) -> Result<Self> {
        if let Some(bad) = values.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(crate::Error::Contract(format!("mask is not binary: found value {bad}")));
        }
        Ok(values.map(|v| v == 1.0))
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_soft(&self) -> SoftMask {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }
}

//! Row-major pixel grids: scalar maps, RGB images and boolean tamper masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Spatial extent of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn area(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn ensure_eq(&self, other: Shape) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", other.height, other.width),
            })
        }
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A single-channel H×W map (density, depth, indicator, variance...).
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    shape: Shape,
    data: Vec<f64>,
}

impl Map {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.area()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.area() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", shape.area()),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.area());
        for row in 0..shape.height {
            for col in 0..shape.width {
                data.push(f(row, col));
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.shape.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Result<Map> {
        self.shape.ensure_eq(other.shape)?;
        Ok(Map {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Mean over the pixels where `mask` is set; `None` if the mask is empty.
    pub fn masked_mean(&self, mask: &TamperMask) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&v, &m) in self.data.iter().zip(mask.flags()) {
            if m {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// An H×W×3 image with channel-interleaved intensities on the 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.area() * Self::CHANNELS],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.area() * Self::CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", shape.area() * Self::CHANNELS),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.shape.width + col) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.shape.width + col) * Self::CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Largest absolute per-value difference.
    pub fn linf_distance(&self, other: &Image) -> Result<f64> {
        self.shape.ensure_eq(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Rounds every intensity to the nearest integer in [0, 255].
    pub fn quantized(&self) -> Image {
        self.map_values(|v| crate::math::round(v.clamp(0.0, 255.0)))
    }

    pub(crate) fn map_values(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Where a tamper mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum MaskProvenance {
    Predicted,
    GroundTruth,
}

/// Per-pixel flags marking attacked pixels, either known or predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TamperMask {
    shape: Shape,
    flags: Vec<bool>,
    provenance: MaskProvenance,
}

impl TamperMask {
    pub fn empty(shape: Shape, provenance: MaskProvenance) -> Self {
        Self {
            shape,
            flags: vec![false; shape.area()],
            provenance,
        }
    }

    pub fn full(shape: Shape, provenance: MaskProvenance) -> Self {
        Self {
            shape,
            flags: vec![true; shape.area()],
            provenance,
        }
    }

    pub fn from_flags(shape: Shape, flags: Vec<bool>, provenance: MaskProvenance) -> Result<Self> {
        if flags.len() != shape.area() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flags", shape.area()),
                actual: format!("{} flags", flags.len()),
            });
        }
        Ok(Self {
            shape,
            flags,
            provenance,
        })
    }

    pub fn from_fn(
        shape: Shape,
        provenance: MaskProvenance,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut flags = Vec::with_capacity(shape.area());
        for row in 0..shape.height {
            for col in 0..shape.width {
                flags.push(f(row, col));
            }
        }
        Self {
            shape,
            flags,
            provenance,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: MaskProvenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.shape.width + col]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }

    pub fn intersection(&self, other: &TamperMask) -> Result<TamperMask> {
        self.combine(other, |a, b| a && b)
    }

    pub fn union(&self, other: &TamperMask) -> Result<TamperMask> {
        self.combine(other, |a, b| a || b)
    }

    /// True when every flagged pixel of `self` is also flagged in `other`.
    pub fn is_subset_of(&self, other: &TamperMask) -> bool {
        self.shape == other.shape
            && self
                .flags
                .iter()
                .zip(&other.flags)
                .all(|(&a, &b)| !a || b)
    }

    fn combine(&self, other: &TamperMask, op: impl Fn(bool, bool) -> bool) -> Result<TamperMask> {
        self.shape.ensure_eq(other.shape)?;
        Ok(TamperMask {
            shape: self.shape,
            flags: self
                .flags
                .iter()
                .zip(&other.flags)
                .map(|(&a, &b)| op(a, b))
                .collect(),
            provenance: self.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_rejects_wrong_length() {
        assert!(Map::from_vec(Shape::new(2, 2), vec![0.0; 3]).is_err());
        assert!(Image::from_vec(Shape::new(2, 2), vec![0.0; 12]).is_ok());
    }

    #[test]
    fn mask_set_ops() {
        let s = Shape::new(2, 2);
        let a = TamperMask::from_flags(s, vec![true, true, false, false], MaskProvenance::Predicted)
            .unwrap();
        let b = TamperMask::from_flags(s, vec![true, false, true, false], MaskProvenance::Predicted)
            .unwrap();
        assert_eq!(a.intersection(&b).unwrap().count(), 1);
        assert_eq!(a.union(&b).unwrap().count(), 3);
        assert!(a.intersection(&b).unwrap().is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
    }

    #[test]
    fn masked_mean_skips_unflagged() {
        let s = Shape::new(1, 3);
        let m = Map::from_vec(s, vec![1.0, 5.0, 9.0]).unwrap();
        let mask = TamperMask::from_flags(s, vec![true, false, true], MaskProvenance::GroundTruth)
            .unwrap();
        assert_eq!(m.masked_mean(&mask), Some(5.0));
        assert_eq!(m.masked_mean(&TamperMask::empty(s, MaskProvenance::GroundTruth)), None);
    }
}

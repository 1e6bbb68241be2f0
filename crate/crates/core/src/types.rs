//! Basic data types shared by the pipeline: images and binary masks.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// An RGB image as an `(H, W, 3)` array of reals in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::shape(format!(
                "image must be (H, W, 3) with H, W >= 1, got ({h}, {w}, {c})"
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::numeric(format!(
                    "image values must be finite and in [0, 1], found {v}"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Rec. 601 luma of each pixel, in `[0, 1]`.
    pub fn luminance(&self) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }
}

/// A binary segmentation mask, `(H, W)` with values in `{0, 1}`.
///
/// The single channel of the on-disk `(H, W, 1)` layout is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    data: Array2<u8>,
}

impl PseudoMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("mask must be non-empty".to_string()));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::numeric(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn image_rejects_out_of_range() {
        let mut a = Array3::zeros((2, 2, 3));
        a[[0, 0, 0]] = 1.5;
        assert!(matches!(ImageTensor::new(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn image_rejects_non_finite() {
        let mut a = Array3::zeros((2, 2, 3));
        a[[1, 1, 2]] = f64::NAN;
        assert!(matches!(ImageTensor::new(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn image_rejects_wrong_channels() {
        let a = Array3::zeros((2, 2, 4));
        assert!(matches!(ImageTensor::new(a), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_rejects_non_binary() {
        let m = array![[0u8, 2u8]];
        assert!(matches!(PseudoMask::new(m), Err(Error::Numeric(_))));
    }

    #[test]
    fn luminance_of_gray_is_identity() {
        let mut a = Array3::zeros((1, 1, 3));
        a.fill(0.25);
        let img = ImageTensor::new(a).unwrap();
        let l = img.luminance();
        assert!((l[[0, 0]] - 0.25).abs() < 1e-12);
    }
}

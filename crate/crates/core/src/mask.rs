//! Single-channel occupancy images in `[0, 1]`, row-major.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl MaskImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} mask",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DegenerateEvidence("mask values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> f64 {
        self.values[(row * self.width + col) as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: f64) {
        self.values[(row * self.width + col) as usize] = value;
    }

    pub fn same_shape(&self, other: &MaskImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Pixels at or above 0.5 become 1, the rest 0.
    pub fn thresholded(&self) -> Self {
        self.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixelwise probabilistic union `1 - (1 - a)(1 - b)`; exact for binary masks.
    pub fn union(&self, other: &MaskImage) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| 1.0 - (1.0 - a) * (1.0 - b))
                .collect(),
        })
    }

    /// Zeroes pixels where `occluder` is set (>= 0.5).
    pub fn masked_out(&self, occluder: &MaskImage) -> Result<Self> {
        self.same_shape(occluder)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&occluder.values)
                .map(|(&v, &o)| if o >= 0.5 { 0.0 } else { v })
                .collect(),
        })
    }

    /// Area-averaging downscale by an integer factor. Trailing rows/columns
    /// that do not fill a whole block are dropped.
    pub fn downscaled(&self, factor: u32) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let mut out = Self::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0;
                let mut n = 0usize;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let (rr, cc) = (r * factor + dr, c * factor + dc);
                        if rr < self.height && cc < self.width {
                            sum += self.get(rr, cc);
                            n += 1;
                        }
                    }
                }
                out.set(r, c, sum / n.max(1) as f64);
            }
        }
        out
    }

    /// Shifts content by whole pixels, filling uncovered pixels with 0.
    pub fn shifted(&self, dx: i32, dy: i32) -> Self {
        let mut out = Self::zeros(self.width, self.height);
        for r in 0..self.height as i32 {
            for c in 0..self.width as i32 {
                let (sr, sc) = (r - dy, c - dx);
                if sr >= 0 && sc >= 0 && sr < self.height as i32 && sc < self.width as i32 {
                    out.set(r as u32, c as u32, self.get(sr as u32, sc as u32));
                }
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Tight bounding box `(x_min, y_min, x_max, y_max)` of set pixels in
    /// continuous pixel coordinates, or `None` when empty.
    pub fn bounding_box(&self) -> Option<[f64; 4]> {
        let mut bb: Option<[u32; 4]> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) >= 0.5 {
                    bb = Some(match bb {
                        None => [c, r, c, r],
                        Some([x0, y0, x1, y1]) => [x0.min(c), y0.min(r), x1.max(c), y1.max(r)],
                    });
                }
            }
        }
        bb.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0])
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(self.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            values: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        }
    }

    /// Writes an 8-bit single-channel PNG (0 = background, 255 = instance).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        Ok(Self::from_gray(&img.to_luma8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_averages_blocks() {
        let mut m = MaskImage::zeros(4, 4);
        m.set(0, 0, 1.0);
        m.set(3, 3, 1.0);
        m.set(3, 2, 1.0);
        let d = m.downscaled(2);
        assert_eq!(d.values, vec![0.25, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = MaskImage::zeros(7, 5);
        m.set(2, 3, 1.0);
        m.save_png(&path).unwrap();
        assert_eq!(MaskImage::load_png(&path).unwrap(), m);
    }

    #[test]
    fn bbox_and_shift() {
        let mut m = MaskImage::zeros(10, 10);
        m.set(2, 3, 1.0);
        m.set(4, 6, 1.0);
        assert_eq!(m.bounding_box(), Some([3.0, 2.0, 7.0, 5.0]));
        let s = m.shifted(1, -1);
        assert_eq!(s.get(1, 4), 1.0);
        assert_eq!(MaskImage::zeros(3, 3).bounding_box(), None);
    }

    #[test]
    fn value_checks() {
        assert!(MaskImage::from_values(2, 2, vec![0.0; 3]).is_err());
        assert!(MaskImage::from_values(1, 1, vec![1.5]).is_err());
    }
}

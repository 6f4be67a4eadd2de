use super::BBox;
use crate::error::{Error, Result};

/// Row-major boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bitwise OR in place. Panics on a dimension mismatch.
    pub fn or_assign(&mut self, other: &BinaryMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn and_count(&self, other: &BinaryMask) -> Result<usize> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch(format!(
                "masks {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }
}

/// Indices along one axis whose pixel centers fall in `[lo, hi)`.
fn covered(lo: f64, hi: f64, len: usize) -> std::ops::Range<usize> {
    let mut start = len;
    let mut end = 0;
    for i in 0..len {
        let c = i as f64 + 0.5;
        if c >= lo && c < hi {
            start = start.min(i);
            end = i + 1;
        }
    }
    if start >= end {
        0..0
    } else {
        start..end
    }
}

/// Pixel `(r, c)` is set iff its center `(c + 0.5, r + 0.5)` lies in the
/// half-open box; parts of the box outside the image are clipped.
pub fn rasterize(bbox: &BBox, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    let cols = covered(bbox.x(), bbox.x_max(), width);
    for r in covered(bbox.y(), bbox.y_max(), height) {
        for c in cols.clone() {
            mask.set(r, c, true);
        }
    }
    mask
}

pub fn union_mask(boxes: &[BBox], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    for b in boxes {
        mask.or_assign(&rasterize(b, width, height));
    }
    mask
}

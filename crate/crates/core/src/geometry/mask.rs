use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Row-major boolean raster. Pixel `(x, y)` has its centre at coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PackedMask", into = "PackedMask")]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct PackedMask {
    width: usize,
    height: usize,
    /// Base64 of the bit raster packed MSB-first, row-major.
    bits: String,
}

/// Nearest pixel index to a sub-pixel coordinate. Ties round to even so that a
/// coordinate exactly between two pixels resolves the same way in both axes.
pub fn nearest_pixel(x: f64, y: f64) -> (i64, i64) {
    (x.round_ties_even() as i64, y.round_ties_even() as i64)
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidMaskSize { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(GeometryError::InvalidMaskSize { width, height });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, GeometryError> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        Ok(m)
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

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.bits[y * self.width + x]
    }

    /// Lookup with signed coordinates; anything outside the raster is unset.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && self.get(x as usize, y as usize)
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let w = self.width;
        self.bits[y * w + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Inclusive pixel bounds `(x_min, y_min, x_max, y_max)` of the set pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (x, y) = (i % self.width, i / self.width);
            out = Some(match out {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        out
    }

    /// Mean position of the set pixels.
    pub fn centroid(&self) -> Result<(f64, f64), GeometryError> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            sx += (i % self.width) as f64;
            sy += (i / self.width) as f64;
            n += 1;
        }
        if n == 0 {
            return Err(GeometryError::EmptyMask);
        }
        Ok((sx / n as f64, sy / n as f64))
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

impl From<BinaryMask> for PackedMask {
    fn from(m: BinaryMask) -> Self {
        let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
        for (i, _) in m.bits.iter().enumerate().filter(|(_, b)| **b) {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
        PackedMask {
            width: m.width,
            height: m.height,
            bits: STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<PackedMask> for BinaryMask {
    type Error = GeometryError;

    fn try_from(p: PackedMask) -> Result<Self, Self::Error> {
        let bytes = STANDARD
            .decode(p.bits.as_bytes())
            .map_err(|e| GeometryError::Raster(format!("mask bits: {e}")))?;
        let n = p.width * p.height;
        if bytes.len() != n.div_ceil(8) {
            return Err(GeometryError::InvalidMaskSize {
                width: p.width,
                height: p.height,
            });
        }
        let bits = (0..n)
            .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        BinaryMask::from_bits(p.width, p.height, bits)
    }
}

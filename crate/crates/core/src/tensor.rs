//! Dense channel-major arrays and class-index maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index inside a label space. `0` is reserved for [`IGNORE`].
pub type ClassIndex = u16;

/// Unlabeled / excluded pixel.
pub const IGNORE: ClassIndex = 0;

/// A `channels × height × width` array stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Values across channels at one spatial location.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// An `height × width` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<ClassIndex>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: ClassIndex) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_rows(rows: &[&[ClassIndex]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabelMap {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> ClassIndex {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: ClassIndex) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sorted distinct non-IGNORE classes present.
    pub fn present_classes(&self) -> Vec<ClassIndex> {
        let mut seen: Vec<ClassIndex> = self.data.iter().copied().filter(|&c| c != IGNORE).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&c| c != IGNORE).count()
    }

    /// Nearest-neighbour resample to a grid `factor` times coarser.
    /// Each coarse cell takes the value at the centre of its block.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 1 {
            return Ok(self.clone());
        }
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let mut out = LabelMap::filled(h, w, IGNORE);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y * factor + off, x * factor + off));
            }
        }
        Ok(out)
    }
}

/// Nearest-neighbour downsampling of a scalar map, same sampling grid as
/// [`LabelMap::downsample`].
pub fn downsample_scalar(values: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return values.to_vec();
    }
    let (h, w) = (height / factor, width / factor);
    let off = factor / 2;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(values[(y * factor + off) * width + x * factor + off]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_takes_block_centres() {
        let mut label = LabelMap::filled(4, 4, 1);
        label.set(1, 1, 2);
        label.set(3, 3, 3);
        let small = label.downsample(2).unwrap();
        assert_eq!(small.data, vec![2, 1, 1, 3]);
        assert!(label.downsample(3).is_err());
    }

    #[test]
    fn present_classes_skips_ignore() {
        let label = LabelMap::from_rows(&[&[0, 3, 1], &[3, 0, 1]]);
        assert_eq!(label.present_classes(), vec![1, 3]);
        assert_eq!(label.labeled_count(), 4);
    }
}

//! Dense `C x H x W` feature maps.
//!
//! `Tensor3` is the single value carrier used throughout the crate: RGB
//! frames, intermediate feature maps, and (with a degenerate spatial extent)
//! parameter vectors and matrices. Data is stored row-major, channel-major:
//! `index = (c * H + h) * W + w`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
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

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Tensor3::from_vec",
                format!("{} values for {channels}x{height}x{width}", channels * height * width),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor3 { channels, height, width, data })
    }

    /// A 1-D vector stored as `n x 1 x 1`.
    pub fn from_slice_1d(values: &[f64]) -> Self {
        Tensor3 {
            channels: values.len(),
            height: 1,
            width: 1,
            data: values.to_vec(),
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(c < self.channels && h < self.height && w < self.width);
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.idx(c, h, w);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.idx(c, h, w);
        self.data[i] += value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(&self, channels: usize, height: usize, width: usize) -> Result<Self> {
        Tensor3::from_vec(channels, height, width, self.data.clone())
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Tensor3::zip_map",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor3 {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; infinity on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if !self.same_shape(other) {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major_row_major() {
        let mut t = Tensor3::zeros(2, 3, 4);
        t.set(1, 2, 3, 7.0);
        assert_eq!(t.data()[(1 * 3 + 2) * 4 + 3], 7.0);
        assert_eq!(t.get(1, 2, 3), 7.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor3::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Tensor3::from_vec(2, 2, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn channel_slice_views_the_right_plane() {
        let t = Tensor3::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.channel(0), &[1.0, 2.0]);
        assert_eq!(t.channel(1), &[3.0, 4.0]);
    }
}

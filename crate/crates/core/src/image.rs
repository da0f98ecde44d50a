//! Channel-last raster images with `f64` samples.

use crate::error::{Error, Result};

/// A `height × width × channels` raster stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn ensure_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn ensure_spatial(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "{what}: expected {height}x{width}, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copy of a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// Average over channels (used for single-channel metrics and slope fits).
    pub fn luma(&self) -> Image {
        let n = self.channels as f64;
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            self.pixel(y, x).iter().sum::<f64>() / n
        })
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// The `height × width` window whose top-left pixel is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "crop {width}x{height} at ({x0}, {y0}) leaves the {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(height, width, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }
}

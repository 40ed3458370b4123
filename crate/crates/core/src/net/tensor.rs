use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `height × width × channels` tensor, channel-fastest row-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}×{width}×{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Tensor { height, width, channels, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let o = self.offset(y, x, c);
        &mut self.data[o]
    }

    /// Channel vector of pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Cyclic column roll: column `x` moves to `(x + k) mod width`.
    pub fn roll_columns(&self, k: usize) -> Tensor {
        let mut out = Tensor::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let dst = (y * self.width + (x + k) % self.width) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(self.pixel(y, x));
            }
        }
        out
    }

    /// Appends the first `extra` columns after the last one (cyclic padding).
    pub fn wrap_pad_columns(&self, extra: usize) -> Tensor {
        if extra == 0 {
            return self.clone();
        }
        let w = self.width + extra;
        let mut out = Tensor::zeros(self.height, w, self.channels);
        for y in 0..self.height {
            for x in 0..w {
                let dst = (y * w + x) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(self.pixel(y, x % self.width));
            }
        }
        out
    }

    /// Gradient of `wrap_pad_columns`: folds padded columns back onto their sources.
    pub fn unwrap_pad_grad(&self, original_width: usize) -> Tensor {
        let mut out = Tensor::zeros(self.height, original_width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(y, x);
                let dst = (y * original_width + x % original_width) * self.channels;
                for (d, s) in out.data[dst..dst + self.channels].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

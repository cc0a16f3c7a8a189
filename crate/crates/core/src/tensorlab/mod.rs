//! Deterministic numeric kernels with hand-written backward passes.
//!
//! All kernels work on [`FeatureMap`] (row-major `H x W x C`, channels
//! fastest) and run in double precision.

mod gradcheck;
mod resize;
mod sample;
mod shuffle;

pub use gradcheck::{check_gradients, rel_error, GradProblem, GradReport};
pub use resize::{bilinear_resize, bilinear_resize_backward, ResizeAxis};
pub use sample::{bilinear_sample, bilinear_sample_backward, SampleGrads};
pub use shuffle::{pixel_shuffle, pixel_shuffle_backward, ShuffleDirection};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source_resolution: Option<usize>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let fm = Self {
            height,
            width,
            channels,
            data,
            source_resolution: None,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            source_resolution: None,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            data: vec![value; height * width * channels],
            ..Self::zeros(height, width, channels)
        }
    }

    pub fn with_source_resolution(mut self, res: usize) -> Self {
        self.source_resolution = Some(res);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid(format!(
                "feature map dims must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(invalid(format!(
                "feature map data length {} != {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("feature map entry {i} is not finite")));
        }
        Ok(())
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.idx(row, col);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.idx(row, col);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Flattens the grid row-major into a token matrix.
    pub fn into_tokens(self) -> TokenSequence {
        TokenSequence {
            length: self.height * self.width,
            dim: self.channels,
            data: self.data,
        }
    }
}

/// `length x dim` token matrix, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub length: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(length: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self { length, dim, data };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(length: usize, dim: usize) -> Self {
        Self {
            length,
            dim,
            data: vec![0.0; length * dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.dim == 0 {
            return Err(invalid(format!(
                "token sequence dims must be positive, got {}x{}",
                self.length, self.dim
            )));
        }
        if self.data.len() != self.length * self.dim {
            return Err(invalid(format!(
                "token data length {} != {}x{}",
                self.data.len(),
                self.length,
                self.dim
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("token sequence contains non-finite values"));
        }
        Ok(())
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Side of the square grid the tokens were flattened from, if any.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.length as f64).sqrt().round() as usize;
        (s * s == self.length).then_some(s)
    }

    pub fn into_grid(self, side: usize) -> Result<FeatureMap> {
        if side * side != self.length {
            return Err(invalid(format!(
                "{} tokens do not form a {side}x{side} grid",
                self.length
            )));
        }
        FeatureMap::new(side, side, self.dim, self.data)
    }
}

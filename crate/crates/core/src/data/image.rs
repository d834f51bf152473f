use crate::error::{Error, Result};

/// Planar (C×H×W) image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Cuts the image into non-overlapping `patch`×`patch` tiles in row-major
    /// grid order. Each row holds one tile flattened as (y, x, channel).
    pub fn patchify(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("{}x{} image is not divisible into {patch}-pixel patches", self.height, self.width),
            ));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..self.channels {
                            out.push(self.get(c, py * patch + y, px * patch + x));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

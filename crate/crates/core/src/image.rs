//! Square multi-channel images with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    /// Row-major `size × size × channels`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == size * size * channels).then_some(Self { size, channels, data })
    }

    pub fn filled(size: usize, channels: usize, value: f32) -> Self {
        Self {
            size,
            channels,
            data: vec![value; size * size * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.size + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.size + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Nearest-neighbour resampling to `size × size`.
    pub fn resized(&self, size: usize) -> Image {
        if size == self.size {
            return self.clone();
        }
        let mut out = Image::filled(size, self.channels, 0.0);
        for y in 0..size {
            let sy = (y * self.size) / size;
            for x in 0..size {
                let sx = (x * self.size) / size;
                let src = self.pixel(sy, sx).to_vec();
                out.pixel_mut(y, x).copy_from_slice(&src);
            }
        }
        out
    }
}

use std::io::Write;

use numcore::Tensor;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

/// A 32 x 32 RGB raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::Image(format!(
                "expected {IMAGE_LEN} values, got {}",
                pixels.len()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn filled(rgb: [f64; 3]) -> Self {
        let pixels = (0..IMAGE_SIZE * IMAGE_SIZE).flat_map(|_| rgb).collect();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Flat `1 x 3072` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.pixels.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.data().to_vec())
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Binary PPM (P6), 8 bits per channel, values clamped to [0, 1] first.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8),
        );
        out
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_ppm())?;
        Ok(())
    }
}

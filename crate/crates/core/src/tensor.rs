//! Channel-last grids used for images, latents and network activations.

use crate::error::{Error, Result};

/// `height × width × channels` values, channel-last (`(y * width + x) * channels + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} = {}", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(shape_str(self), shape_str(other)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Euclidean distance; panics on shape mismatch.
    pub fn l2_distance(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "l2_distance on mismatched grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bit pattern of every value, for exact comparisons and hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn shape_str(g: &Grid) -> String {
    format!("{}x{}x{}", g.height, g.width, g.channels)
}

/// An RGB image with values in `[0, 1]` and power-of-two sides of at least 8.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Grid);

impl ImageTensor {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.channels != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 3 channels, got {}",
                grid.channels
            )));
        }
        for side in [grid.height, grid.width] {
            if side < 8 || !side.is_power_of_two() {
                return Err(Error::InvalidImage(format!("side {side} is not a power of two >= 8")));
            }
        }
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample_to(&self, height: usize, width: usize) -> Result<ImageTensor> {
        let g = &self.0;
        if (height, width) == (g.height, g.width) {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 || !g.height.is_multiple_of(height) || !g.width.is_multiple_of(width) {
            return Err(Error::InvalidImage(format!(
                "cannot box-resize {}x{} to {height}x{width}",
                g.height, g.width
            )));
        }
        let (fy, fx) = (g.height / height, g.width / width);
        let norm = 1.0 / (fy * fx) as f64;
        let mut out = Grid::zeros(height, width, 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            acc += g.data[((y * fy + dy) * g.width + x * fx + dx) * 3 + c];
                        }
                    }
                    out.data[(y * width + x) * 3 + c] = acc * norm;
                }
            }
        }
        ImageTensor::new(out)
    }
}

/// A latent `h × w × d2` tensor with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(pub Grid);

impl LatentTensor {
    pub fn new(grid: Grid) -> Result<Self> {
        if !grid.is_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self(Grid::zeros(height, width, channels))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    pub fn l2_distance(&self, other: &LatentTensor) -> f64 {
        self.0.l2_distance(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_bad_sides() {
        assert!(ImageTensor::new(Grid::zeros(8, 8, 3)).is_ok());
        assert!(ImageTensor::new(Grid::zeros(12, 8, 3)).is_err());
        assert!(ImageTensor::new(Grid::zeros(4, 4, 3)).is_err());
        assert!(ImageTensor::new(Grid::zeros(8, 8, 1)).is_err());
        let mut g = Grid::zeros(8, 8, 3);
        g.data[5] = 1.5;
        assert!(ImageTensor::new(g).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut g = Grid::zeros(16, 16, 3);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = ((i / 3) % 2) as f64;
        }
        let img = ImageTensor::new(g).unwrap();
        let small = img.downsample_to(8, 8).unwrap();
        assert!(small.grid().data.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
